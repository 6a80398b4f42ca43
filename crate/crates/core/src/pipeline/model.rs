use crate::action::{Action, ActionSequence};
use crate::dataio::Example;
use crate::decoder::{ClassifierHeads, Decoder, FuturePredictions};
use crate::encoder::{Encoder, MemorySequence};
use crate::error::{Error, Result};
use crate::interaction::ActionTaxonomy;
use crate::nn::{Ctx, Linear, ParamStore};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

use super::config::TrainConfig;

/// Mamba encoder, query decoder and classifier heads with their parameters.
#[derive(Clone, Debug)]
pub struct QueryMamba<T: Scalar> {
    pub config: TrainConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub heads: ClassifierHeads,
    /// Per-frame verb and noun classifiers on the short-term encoding.
    pub aux_heads: Option<(Linear, Linear)>,
    pub taxonomy: Option<ActionTaxonomy>,
}

/// Tape handles of one forward pass.
pub struct ForwardVars {
    pub short: Var,
    pub future: Var,
    pub verb_logits: Var,
    pub noun_logits: Var,
    pub action_logits: Option<Var>,
}

/// Loss terms of one example; `total` is their unweighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub verb: f64,
    pub noun: f64,
    pub action: f64,
    pub aux: f64,
}

impl<T: Scalar> QueryMamba<T> {
    /// Parameters are named and each is drawn from its own stream, so adding
    /// the action head leaves every other initial value unchanged.
    pub fn new(config: TrainConfig, taxonomy: Option<ActionTaxonomy>) -> Result<Self> {
        config.validate()?;
        if config.loss_action && taxonomy.as_ref().is_none_or(|t| t.is_empty()) {
            return Err(Error::Config("the action loss needs a non-empty taxonomy".into()));
        }
        let mut store = ParamStore::new(config.seed);
        let encoder = Encoder::new(&mut store, config.encoder_config())?;
        let decoder = Decoder::new(&mut store, config.decoder_config())?;
        let num_actions = if config.loss_action {
            taxonomy.as_ref().map(|t| t.len())
        } else {
            None
        };
        let heads = ClassifierHeads::new(&mut store, config.d_model, config.num_verbs, config.num_nouns, num_actions);
        let aux_heads = config.loss_aux_short_term.then(|| {
            (
                Linear::new(&mut store, "aux.verb", config.d_model, config.num_verbs, true),
                Linear::new(&mut store, "aux.noun", config.d_model, config.num_nouns, true),
            )
        });
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            heads,
            aux_heads,
            taxonomy,
        })
    }

    pub fn has_action_head(&self) -> bool {
        self.heads.action.is_some()
    }

    fn check_memory(&self, memory: &MemorySequence<T>) -> Result<()> {
        if memory.long_len != self.config.long_len || memory.short_len != self.config.short_len {
            return Err(Error::dim(
                "memory horizons",
                &[memory.long_len, memory.short_len],
                &[self.config.long_len, self.config.short_len],
            ));
        }
        Ok(())
    }

    pub fn forward_vars(&self, ctx: &Ctx<'_, T>, memory: &MemorySequence<T>) -> Result<ForwardVars> {
        self.check_memory(memory)?;
        let m = ctx.tape.constant(memory.embeddings.clone());
        let enc = self.encoder.encode_vars(ctx, m, memory.long_len, memory.short_len)?;
        let future = self.decoder.decode_vars(ctx, enc.short)?;
        let logits = self.heads.logits(ctx, future)?;
        Ok(ForwardVars {
            short: enc.short,
            future,
            verb_logits: logits.verb,
            noun_logits: logits.noun,
            action_logits: logits.action,
        })
    }

    /// Inference-only forward pass.
    pub fn predict(&self, memory: &MemorySequence<T>) -> Result<FuturePredictions<T>> {
        self.check_memory(memory)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, false);
        let m = tape.constant(memory.embeddings.clone());
        let enc = self.encoder.encode_vars(&ctx, m, memory.long_len, memory.short_len)?;
        let future = self.decoder.decode_vars(&ctx, enc.short)?;
        self.heads.classify(&ctx, future)
    }

    /// Cross-entropy terms of one example on the tape.
    pub fn loss_vars(&self, ctx: &Ctx<'_, T>, example: &Example<T>) -> Result<(Var, LossParts)> {
        let z = self.config.num_queries;
        if example.targets.len() != z {
            return Err(Error::dim("targets", &[example.targets.len()], &[z]));
        }
        let tape = ctx.tape;
        let fv = self.forward_vars(ctx, &example.memory)?;
        let mut terms: Vec<Var> = Vec::new();
        let mut parts = LossParts::default();
        let scalar = |v: Var| tape.value(v).data()[0].as_f64();
        let some = |ids: Vec<usize>| ids.into_iter().map(Some).collect::<Vec<_>>();

        if self.config.loss_verb {
            let l = tape.cross_entropy(fv.verb_logits, &some(example.targets.verbs()))?;
            parts.verb = scalar(l);
            terms.push(l);
        }
        if self.config.loss_noun {
            let l = tape.cross_entropy(fv.noun_logits, &some(example.targets.nouns()))?;
            parts.noun = scalar(l);
            terms.push(l);
        }
        if self.config.loss_action {
            let (Some(logits), Some(tax)) = (fv.action_logits, self.taxonomy.as_ref()) else {
                return Err(Error::Config("the action loss needs a taxonomy".into()));
            };
            // pairs outside the taxonomy carry no action label
            let ids: Vec<Option<usize>> = example.targets.0.iter().map(|&a| tax.action_id(a)).collect();
            let l = tape.cross_entropy(logits, &ids)?;
            parts.action = scalar(l);
            terms.push(l);
        }
        if let Some((aux_verb, aux_noun)) = &self.aux_heads {
            let long = example.memory.long_len;
            let labels = &example.frame_labels[long..];
            let verbs: Vec<Option<usize>> = labels.iter().map(|a| a.map(|a| a.verb)).collect();
            let nouns: Vec<Option<usize>> = labels.iter().map(|a| a.map(|a| a.noun)).collect();
            let lv = tape.cross_entropy(aux_verb.forward(ctx, fv.short)?, &verbs)?;
            let ln = tape.cross_entropy(aux_noun.forward(ctx, fv.short)?, &nouns)?;
            let l = tape.add(lv, ln)?;
            parts.aux = scalar(l);
            terms.push(l);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        parts.total = scalar(total);
        Ok((total, parts))
    }

    /// Loss of one example without gradients.
    pub fn loss(&self, example: &Example<T>) -> Result<LossParts> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, false);
        Ok(self.loss_vars(&ctx, example)?.1)
    }

    /// Per-slot maximum-probability predictions. With an action head the
    /// pair comes from the action distribution through the taxonomy.
    pub fn argmax_actions(&self, preds: &FuturePredictions<T>) -> Result<ActionSequence> {
        let argmax = |t: &Tensor<T>, r: usize| {
            let row = t.row(r);
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best
        };
        let z = preds.verbs.shape()[0];
        match (&preds.actions, &self.taxonomy) {
            (Some(act), Some(tax)) => (0..z)
                .map(|r| {
                    tax.action(argmax(act, r))
                        .ok_or_else(|| Error::Invalid("action head wider than taxonomy".into()))
                })
                .collect(),
            _ => Ok((0..z)
                .map(|r| Action::new(argmax(&preds.verbs, r), argmax(&preds.nouns, r)))
                .collect()),
        }
    }
}
