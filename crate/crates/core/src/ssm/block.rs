//! The Mamba block: pre-norm, gated selective-SSM branch, residual add.

use serde::{Deserialize, Serialize};

use super::scan::ScanMode;
use super::selective::selective_scan;
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, ParamId, ParamStore};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::rng_for;
use crate::scalar::{softplus_inverse, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub d_model: usize,
    pub expand: usize,
    pub n_state: usize,
    pub conv_width: usize,
    /// Rank of the low-rank projection producing the step-size logits.
    pub dt_rank: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    pub scan: ScanMode,
}

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            expand: 2,
            n_state: 16,
            conv_width: 4,
            dt_rank: d_model.div_ceil(16),
            dt_min: 1e-3,
            dt_max: 1e-1,
            scan: ScanMode::Sequential,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.expand == 0 || self.n_state == 0 || self.conv_width == 0 || self.dt_rank == 0 {
            return Err(Error::Config(format!("Mamba extents must be >= 1: {self:?}")));
        }
        if !(0.0 < self.dt_min && self.dt_min <= self.dt_max) {
            return Err(Error::Config("need 0 < dt_min <= dt_max".into()));
        }
        Ok(())
    }
}

/// Parameters of one block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MambaBlockWeights {
    pub norm: LayerNorm,
    /// `D → 2·E·D`: columns `[0, E·D)` feed the SSM branch, the rest the gate.
    pub in_proj: Linear,
    /// Depthwise kernel `[W × E·D]`; row `w` multiplies the input `w` steps back.
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub b_proj: Linear,
    pub c_proj: Linear,
    pub dt_down: Linear,
    pub dt_up: Linear,
    pub dt_bias: ParamId,
    /// `A = −exp(a_log)`, `[E·D × N]`.
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out_proj: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MambaBlock {
    pub config: MambaConfig,
    pub weights: MambaBlockWeights,
}

impl MambaBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: MambaConfig) -> Result<Self> {
        config.validate()?;
        let (d, inner, ns, w) = (config.d_model, config.inner(), config.n_state, config.conv_width);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), d, 2 * inner, false);
        let conv_kernel = store.randn(&format!("{name}.conv.w"), &[w, inner], 1.0 / (w as f64).sqrt());
        let conv_bias = store.constant(&format!("{name}.conv.b"), &[inner], 0.0);
        let b_proj = Linear::new(store, &format!("{name}.b_proj"), inner, ns, false);
        let c_proj = Linear::new(store, &format!("{name}.c_proj"), inner, ns, false);
        let dt_down = Linear::new(store, &format!("{name}.dt_down"), inner, config.dt_rank, false);
        let dt_up = Linear::new(store, &format!("{name}.dt_up"), config.dt_rank, inner, false);

        // Step sizes log-uniform in [dt_min, dt_max] at init.
        let mut rng = rng_for(store.seed(), &format!("{name}.dt_bias"));
        let (lo, hi) = (config.dt_min.ln(), config.dt_max.ln());
        let dt0 = Tensor::<T>::uniform(&[inner], T::of(lo), T::of(hi), &mut rng);
        let dt_bias = store.add(&format!("{name}.dt_bias"), dt0.map(|v| softplus_inverse(v.exp())), false);

        let a_log = store.add(
            &format!("{name}.a_log"),
            Tensor::from_fn(&[inner, ns], |i| T::of(((i % ns) + 1) as f64).ln()),
            false,
        );
        let d_skip = store.constant(&format!("{name}.d_skip"), &[inner], 1.0);
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), inner, d, false);
        Ok(Self {
            config,
            weights: MambaBlockWeights {
                norm,
                in_proj,
                conv_kernel,
                conv_bias,
                b_proj,
                c_proj,
                dt_down,
                dt_up,
                dt_bias,
                a_log,
                d_skip,
                out_proj,
            },
        })
    }

    /// `x + out_proj(SSM(silu(conv(in_x))) ⊙ silu(in_z))` with `in = in_proj(norm(x))`.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let tape = ctx.tape;
        let w = &self.weights;
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.config.d_model {
            return Err(Error::dim("mamba block input", &shape, &[0, self.config.d_model]));
        }
        let inner = self.config.inner();
        let xn = w.norm.forward(ctx, x)?;
        let xz = w.in_proj.forward(ctx, xn)?;
        let xb = tape.slice_cols(xz, 0, inner)?;
        let gate = tape.slice_cols(xz, inner, inner)?;

        let conv = tape.conv1d_causal(xb, ctx.p(w.conv_kernel))?;
        let conv = tape.add(conv, ctx.p(w.conv_bias))?;
        let u = tape.silu(conv);

        let b = w.b_proj.forward(ctx, u)?;
        let c = w.c_proj.forward(ctx, u)?;
        let dt_low = w.dt_down.forward(ctx, u)?;
        let dt_logit = w.dt_up.forward(ctx, dt_low)?;
        let dt_logit = tape.add(dt_logit, ctx.p(w.dt_bias))?;
        let delta = tape.softplus(dt_logit);
        let a = tape.neg(tape.exp(ctx.p(w.a_log)));

        let y = selective_scan(tape, u, delta, a, b, c, ctx.p(w.d_skip), self.config.scan)?;
        let gated = tape.mul(y, tape.silu(gate))?;
        let out = w.out_proj.forward(ctx, gated)?;
        tape.add(x, out)
    }
}

/// Inference-only forward of a single block on a `[T×D]` input.
pub fn mamba_block_forward<T: Scalar>(
    store: &ParamStore<T>,
    block: &MambaBlock,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.dims2()?.0 == 0 {
        return Err(Error::Parameter("empty sequence".into()));
    }
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, false);
    let xv = tape.constant(x.clone());
    let y = block.forward(&ctx, xv)?;
    Ok((*tape.value(y)).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_param_gradients;
    use crate::rng::rng_from;

    fn small(seed: u64) -> (ParamStore<f64>, MambaBlock) {
        let mut store = ParamStore::new(seed);
        let mut cfg = MambaConfig::new(6);
        cfg.n_state = 4;
        cfg.conv_width = 3;
        let block = MambaBlock::new(&mut store, "blk", cfg).unwrap();
        (store, block)
    }

    #[test]
    fn shape_is_preserved() {
        for (len, seed) in [(1, 1), (5, 2), (17, 3)] {
            let (store, block) = small(seed);
            let x = Tensor::randn(&[len, 6], 1.0, &mut rng_from(seed));
            let y = mamba_block_forward(&store, &block, &x).unwrap();
            assert_eq!(y.shape(), &[len, 6]);
            assert!(y.is_finite());
        }
    }

    #[test]
    fn wrong_width_is_a_dimension_error() {
        let (store, block) = small(1);
        let x = Tensor::<f64>::zeros(&[4, 5]);
        assert!(matches!(mamba_block_forward(&store, &block, &x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn initial_step_sizes_are_in_range() {
        let (store, block) = small(4);
        let bias = &store.get(block.weights.dt_bias).value;
        for &b in bias.data() {
            let dt = crate::scalar::softplus(b);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn block_is_causal() {
        let (store, block) = small(5);
        let x = Tensor::randn(&[10, 6], 1.0, &mut rng_from(6));
        let base = mamba_block_forward(&store, &block, &x).unwrap();
        for t in [0, 4, 9] {
            let mut x2 = x.clone();
            for c in 0..6 {
                x2.data_mut()[t * 6 + c] += 0.7;
            }
            let y = mamba_block_forward(&store, &block, &x2).unwrap();
            for s in 0..t {
                assert_eq!(y.row(s), base.row(s), "row {s} changed after perturbing {t}");
            }
            assert_ne!(y.row(t), base.row(t));
        }
    }

    #[test]
    fn parallel_scan_mode_matches() {
        let (store, mut block) = small(7);
        let x = Tensor::randn(&[12, 6], 1.0, &mut rng_from(8));
        let a = mamba_block_forward(&store, &block, &x).unwrap();
        block.config.scan = ScanMode::Parallel;
        let b = mamba_block_forward(&store, &block, &x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn gradient_through_block() {
        let (store, block) = small(9);
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng_from(10));
        let probe = Tensor::randn(&[5, 6], 1.0, &mut rng_from(11));
        let rep = check_param_gradients(&store, 1e-5, |ctx| {
            let tape = ctx.tape;
            let y = block.forward(ctx, tape.constant(x.clone()))?;
            let p = tape.mul(y, tape.constant(probe.clone()))?;
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(rep.max_relative_error() < 1e-4, "{rep:?}");
    }
}
