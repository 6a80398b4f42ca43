use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetShape, WorldOptions};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::interaction::DecodeMode;
use crate::ssm::{MambaConfig, ScanMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Flat run configuration. Every field has a desk-scale default, so a config
/// file only lists overrides as `key = value` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub precision: Precision,

    // synthetic data
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub sparsity: f64,
    pub fanout: usize,
    pub concentration: f64,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub two_stream: bool,
    pub train_clips: usize,
    pub val_clips: usize,
    pub clip_duration_s: f64,

    // model
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub n_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub scan: ScanMode,
    pub long_len: usize,
    pub short_len: usize,
    pub num_queries: usize,
    pub self_attention: bool,
    pub learnable_query_content: bool,
    pub memory_pos: bool,

    // optimisation
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub cuts_per_clip: usize,

    // losses
    pub loss_verb: bool,
    pub loss_noun: bool,
    pub loss_action: bool,
    pub loss_aux_short_term: bool,

    // inference
    pub decode_mode: DecodeMode,
    pub k: usize,
    pub use_interaction: bool,
    pub cooc_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            num_verbs: 12,
            num_nouns: 24,
            sparsity: 0.2,
            fanout: 3,
            concentration: 0.3,
            feature_dim: 32,
            noise_sigma: 0.5,
            two_stream: false,
            train_clips: 500,
            val_clips: 100,
            clip_duration_s: 60.0,
            d_model: 64,
            enc_layers: 4,
            dec_layers: 4,
            heads: 8,
            ffn_mult: 4,
            n_state: 16,
            expand: 2,
            conv_width: 4,
            scan: ScanMode::Sequential,
            long_len: 48,
            short_len: 24,
            num_queries: 8,
            self_attention: true,
            learnable_query_content: false,
            memory_pos: false,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            warmup_steps: 0,
            epochs: 10,
            max_steps: 0,
            cuts_per_clip: 4,
            loss_verb: true,
            loss_noun: true,
            loss_action: false,
            loss_aux_short_term: false,
            decode_mode: DecodeMode::Sample,
            k: 5,
            use_interaction: true,
            cooc_smoothing: 0.0,
        }
    }
}

impl TrainConfig {
    /// Parses `key = value` lines; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.loss_verb || self.loss_noun) {
            return fail("at least one of loss_verb and loss_noun must be enabled");
        }
        if self.short_len == 0 || self.num_queries == 0 || self.k == 0 || self.batch_size == 0 {
            return fail("short_len, num_queries, k and batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("learning_rate must be positive and betas in [0, 1)");
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 || self.cooc_smoothing < 0.0 {
            return fail("grad_clip must be positive; weight_decay and cooc_smoothing non-negative");
        }
        self.encoder_config().mamba.validate()?;
        self.decoder_config().validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let mut mamba = MambaConfig::new(self.d_model);
        mamba.n_state = self.n_state;
        mamba.expand = self.expand;
        mamba.conv_width = self.conv_width;
        mamba.scan = self.scan;
        EncoderConfig {
            d_input: self.feature_dim,
            layers: self.enc_layers,
            mamba,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let mut d = DecoderConfig::new(self.d_model, self.num_queries, self.short_len);
        d.layers = self.dec_layers;
        d.heads = self.heads;
        d.ffn_mult = self.ffn_mult;
        d.self_attention = self.self_attention;
        d.learnable_content = self.learnable_query_content;
        d.memory_pos = self.memory_pos;
        d
    }

    pub fn world_options(&self) -> WorldOptions {
        WorldOptions {
            fanout: self.fanout,
            concentration: self.concentration,
            feature_dim: self.feature_dim,
            noise_sigma: self.noise_sigma,
            two_stream: self.two_stream,
            ..WorldOptions::default()
        }
    }

    /// Clips long enough to hold a full target sequence after any cut.
    pub fn dataset_shape(&self) -> DatasetShape {
        DatasetShape {
            train_clips: self.train_clips,
            val_clips: self.val_clips,
            duration_s: self.clip_duration_s,
            min_events: self.num_queries + 1,
        }
    }
}
