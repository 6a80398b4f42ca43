//! Input projection, long/short memory split and the stacked Mamba encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, ParamStore};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::ssm::{MambaBlock, MambaConfig};

/// Observation `M` of `L + S` embedding rows; the last `S` rows are the
/// short-term memory.
#[derive(Clone, Debug, PartialEq)]
pub struct MemorySequence<T> {
    pub embeddings: Tensor<T>,
    pub long_len: usize,
    pub short_len: usize,
    /// `false` for zero-padded rows with no observation behind them.
    pub mask: Vec<bool>,
}

impl<T: Scalar> MemorySequence<T> {
    pub fn new(embeddings: Tensor<T>, long_len: usize, short_len: usize) -> Result<Self> {
        let rows = embeddings.dims2()?.0;
        let mask = vec![true; rows];
        Self::with_mask(embeddings, long_len, short_len, mask)
    }

    pub fn with_mask(embeddings: Tensor<T>, long_len: usize, short_len: usize, mask: Vec<bool>) -> Result<Self> {
        if short_len == 0 {
            return Err(Error::Config("short-term memory must hold at least one row".into()));
        }
        let rows = embeddings.dims2()?.0;
        if rows != long_len + short_len {
            return Err(Error::dim("memory rows vs L+S", &[rows], &[long_len + short_len]));
        }
        if mask.len() != rows {
            return Err(Error::dim("memory mask", &[mask.len()], &[rows]));
        }
        Ok(Self {
            embeddings,
            long_len,
            short_len,
            mask,
        })
    }

    pub fn total_len(&self) -> usize {
        self.long_len + self.short_len
    }

    pub fn input_dim(&self) -> usize {
        self.embeddings.last_dim()
    }
}

/// Encoder outputs; `long` is absent when `L = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedMemory<T> {
    pub long: Option<Tensor<T>>,
    pub short: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_input: usize,
    pub layers: usize,
    pub mamba: MambaConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input_proj: Linear,
    pub blocks: Vec<MambaBlock>,
    pub final_norm: LayerNorm,
}

/// Tape handles of the encoded split.
pub struct EncodedVars {
    pub long: Option<Var>,
    pub short: Var,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: EncoderConfig) -> Result<Self> {
        if config.d_input == 0 {
            return Err(Error::Config("input width must be >= 1".into()));
        }
        let d = config.mamba.d_model;
        let input_proj = Linear::new(store, "enc.input_proj", config.d_input, d, true);
        let blocks = (0..config.layers)
            .map(|i| MambaBlock::new(store, &format!("enc.block{i}"), config.mamba.clone()))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(store, "enc.final_norm", d);
        Ok(Self {
            config,
            input_proj,
            blocks,
            final_norm,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.mamba.d_model
    }

    /// Single linear layer `D′ → D`.
    pub fn project_input<T: Scalar>(&self, ctx: &Ctx<'_, T>, m: Var) -> Result<Var> {
        let shape = ctx.tape.shape(m);
        if shape.len() != 2 || shape[1] != self.config.d_input {
            return Err(Error::dim("project_input", &shape, &[0, self.config.d_input]));
        }
        self.input_proj.forward(ctx, m)
    }

    /// Runs all `L + S` rows through the block stack as one causal sequence,
    /// then splits the output into the first `L` and last `S` rows.
    pub fn encode_vars<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        m: Var,
        long_len: usize,
        short_len: usize,
    ) -> Result<EncodedVars> {
        if short_len == 0 {
            return Err(Error::Config("short-term memory must hold at least one row".into()));
        }
        let rows = ctx.tape.shape(m)[0];
        if rows != long_len + short_len {
            return Err(Error::dim("encode rows vs L+S", &[rows], &[long_len + short_len]));
        }
        let mut x = self.project_input(ctx, m)?;
        for block in &self.blocks {
            x = block.forward(ctx, x)?;
        }
        let x = self.final_norm.forward(ctx, x)?;
        let long = if long_len > 0 {
            Some(ctx.tape.slice_rows(x, 0, long_len)?)
        } else {
            None
        };
        let short = ctx.tape.slice_rows(x, long_len, short_len)?;
        Ok(EncodedVars { long, short })
    }

    /// Inference-only encoding.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, memory: &MemorySequence<T>) -> Result<EncodedMemory<T>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false);
        let m = tape.constant(memory.embeddings.clone());
        let enc = self.encode_vars(&ctx, m, memory.long_len, memory.short_len)?;
        Ok(EncodedMemory {
            long: enc.long.map(|v| (*tape.value(v)).clone()),
            short: (*tape.value(enc.short)).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_param_gradients;
    use crate::numerics::check_gradients;
    use crate::rng::rng_from;

    fn config(d_input: usize, d_model: usize, layers: usize) -> EncoderConfig {
        let mut mamba = MambaConfig::new(d_model);
        mamba.n_state = 4;
        EncoderConfig {
            d_input,
            layers,
            mamba,
        }
    }

    #[test]
    fn identity_projection_passes_input_through() {
        let mut store = ParamStore::<f64>::new(1);
        let enc = Encoder::new(&mut store, config(4, 4, 0)).unwrap();
        store.get_mut(enc.input_proj.w).value = Tensor::identity(4);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng_from(2));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let y = enc.project_input(&ctx, tape.constant(x.clone())).unwrap();
        assert_eq!(*tape.value(y), x);
    }

    #[test]
    fn zero_input_projects_to_bias() {
        let mut store = ParamStore::<f64>::new(1);
        let enc = Encoder::new(&mut store, config(3, 5, 0)).unwrap();
        let bias = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0, 1.5]);
        store.get_mut(enc.input_proj.b.unwrap()).value = bias.clone();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let y = enc.project_input(&ctx, tape.constant(Tensor::zeros(&[4, 3]))).unwrap();
        let y = tape.value(y);
        for r in 0..4 {
            assert_eq!(y.row(r), bias.data());
        }
    }

    #[test]
    fn projection_width_mismatch() {
        let mut store = ParamStore::<f64>::new(1);
        let enc = Encoder::new(&mut store, config(3, 5, 0)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        assert!(enc.project_input(&ctx, tape.constant(Tensor::zeros(&[4, 2]))).is_err());
    }

    #[test]
    fn projection_gradient() {
        let mut store = ParamStore::<f64>::new(3);
        let enc = Encoder::new(&mut store, config(3, 4, 0)).unwrap();
        let rep = check_gradients(
            &[Tensor::randn(&[5, 3], 1.0, &mut rng_from(4))],
            |tape, v| {
                let ctx = Ctx::new(tape, &store, false);
                let y = enc.project_input(&ctx, v[0])?;
                let p = tape.mul(y, tape.constant(Tensor::randn(&[5, 4], 1.0, &mut rng_from(5))))?;
                Ok(tape.sum(p))
            },
            1e-5,
        )
        .unwrap();
        assert!(rep.max_relative_error() < 1e-4);
        let x = Tensor::randn(&[5, 3], 1.0, &mut rng_from(6));
        let rep = check_param_gradients(&store, 1e-5, |ctx| {
            let y = enc.project_input(ctx, ctx.tape.constant(x.clone()))?;
            let y = ctx.tape.mul(y, y)?;
            Ok(ctx.tape.sum(y))
        })
        .unwrap();
        assert!(rep.max_relative_error() < 1e-4);
    }

    #[test]
    fn split_shapes_and_short_only() {
        let mut store = ParamStore::<f64>::new(7);
        let enc = Encoder::new(&mut store, config(3, 8, 2)).unwrap();
        let m = MemorySequence::new(Tensor::randn(&[10, 3], 1.0, &mut rng_from(8)), 6, 4).unwrap();
        let out = enc.encode(&store, &m).unwrap();
        assert_eq!(out.long.as_ref().unwrap().shape(), &[6, 8]);
        assert_eq!(out.short.shape(), &[4, 8]);

        let short_only = MemorySequence::new(Tensor::randn(&[4, 3], 1.0, &mut rng_from(9)), 0, 4).unwrap();
        let out = enc.encode(&store, &short_only).unwrap();
        assert!(out.long.is_none());
        assert_eq!(out.short.shape(), &[4, 8]);
    }

    #[test]
    fn empty_short_memory_rejected() {
        assert!(matches!(
            MemorySequence::new(Tensor::<f64>::zeros(&[3, 2]), 3, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn information_flows_forward_only() {
        let mut store = ParamStore::<f64>::new(10);
        let enc = Encoder::new(&mut store, config(3, 8, 2)).unwrap();
        let x = Tensor::randn(&[9, 3], 1.0, &mut rng_from(11));
        let base = enc.encode(&store, &MemorySequence::new(x.clone(), 5, 4).unwrap()).unwrap();

        let mut long_changed = x.clone();
        long_changed.data_mut()[3] += 1.0; // row 1, in M_L
        let out = enc.encode(&store, &MemorySequence::new(long_changed, 5, 4).unwrap()).unwrap();
        assert!(out.short.max_abs_diff(&base.short) > 1e-8);

        let mut short_changed = x;
        short_changed.data_mut()[7 * 3] += 1.0; // row 7, in M_S
        let out = enc.encode(&store, &MemorySequence::new(short_changed, 5, 4).unwrap()).unwrap();
        assert_eq!(out.long, base.long);
    }
}
