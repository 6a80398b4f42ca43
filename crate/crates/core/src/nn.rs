//! Parameter storage and the small layers shared by encoder and decoder.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::gradcheck::relative_error;
use crate::numerics::{GradCheckReport, Gradients, Tape, Tensor, Var};
use crate::rng::rng_for;
use crate::scalar::Scalar;

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    #[serde(skip)]
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Owns every parameter of a model. Initial values are drawn from a stream
/// derived from the store seed and the parameter name.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ParamStore<T> {
    seed: u64,
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, decay: bool) -> ParamId {
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate {name}");
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
            requires_grad: true,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let mut rng = rng_for(self.seed, name);
        let v = Tensor::randn(shape, T::of(std), &mut rng);
        self.add(name, v, shape.len() >= 2)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let mut rng = rng_for(self.seed, name);
        let v = Tensor::uniform(shape, T::of(lo), T::of(hi), &mut rng);
        self.add(name, v, shape.len() >= 2)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, T::of(value)), false)
    }

    /// Excludes a parameter from training.
    pub fn freeze(&mut self, id: ParamId) {
        self.params[id.0].requires_grad = false;
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `scale·∂` from a backward pass into the stored gradients.
    pub fn accumulate(&mut self, bindings: &[(ParamId, Var)], grads: &Gradients<T>, scale: T) {
        for &(id, var) in bindings {
            let Some(g) = grads.get(var) else { continue };
            let p = &mut self.params[id.0];
            let acc = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for (a, &b) in acc.data_mut().iter_mut().zip(g) {
                *a += scale * b;
            }
        }
    }

    /// Copies values from another store with the same layout.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        let by_name: BTreeMap<&str, &Param<T>> =
            other.params.iter().map(|p| (p.name.as_str(), p)).collect();
        for p in &mut self.params {
            let src = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Invalid(format!("missing parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::dim("load parameter", p.value.shape(), src.value.shape()));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// Binds store parameters onto a tape for one forward pass.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    store: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
    track_grads: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// `track_grads = false` binds every parameter as a constant.
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, track_grads: bool) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            track_grads,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let param = self.store.get(id);
        let v = if self.track_grads && param.requires_grad {
            self.tape.leaf(param.value.clone())
        } else {
            self.tape.constant(param.value.clone())
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.randn(&format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        let b = bias.then(|| store.constant(&format!("{name}.b"), &[fan_out], 0.0));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.tape.linear(x, ctx.p(self.w), self.b.map(|b| ctx.p(b)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.constant(&format!("{name}.gamma"), &[width], 1.0),
            beta: store.constant(&format!("{name}.beta"), &[width], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.tape
            .layer_norm(x, ctx.p(self.gamma), ctx.p(self.beta), T::of(Self::EPS))
    }
}

/// Finite-difference check of every parameter gradient of the scalar built by
/// `f`. Reports one norm-wise relative error per parameter, in store order.
pub fn check_param_gradients<F>(store: &ParamStore<f64>, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Ctx<'_, f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, s, false);
        let out = f(&ctx)?;
        Ok(tape.value(out).data()[0])
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, true);
    let out = f(&ctx)?;
    let grads = tape.backward(out)?;
    let bindings = ctx.bindings();

    let mut work = store.clone();
    let mut relative_errors = Vec::with_capacity(store.len());
    let mut max_abs_error = 0.0_f64;
    for id in store.ids() {
        if !store.get(id).requires_grad {
            continue;
        }
        let analytic = bindings
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|&(_, v)| grads.tensor(v))
            .unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape()));
        let mut numeric = vec![0.0; analytic.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).value.data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        for (a, n) in analytic.data().iter().zip(&numeric) {
            max_abs_error = max_abs_error.max((a - n).abs());
        }
        relative_errors.push(relative_error(analytic.data(), &numeric));
    }
    Ok(GradCheckReport {
        relative_errors,
        max_abs_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let mut a = ParamStore::<f64>::new(5);
        let mut b = ParamStore::<f64>::new(5);
        let wa = a.randn("x.w", &[3, 3], 1.0);
        b.randn("other", &[2], 1.0);
        let wb = b.randn("x.w", &[3, 3], 1.0);
        assert_eq!(a.get(wa).value, b.get(wb).value);
    }

    #[test]
    fn gradients_flow_into_store() {
        let mut store = ParamStore::<f64>::new(1);
        let lin = Linear::new(&mut store, "l", 3, 2, true);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, true);
        let x = tape.constant(Tensor::filled(&[4, 3], 1.0));
        let y = lin.forward(&ctx, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        let bindings = ctx.bindings();
        drop(ctx);
        store.accumulate(&bindings, &g, 0.5);
        let gb = store.get(lin.b.unwrap()).grad.clone().unwrap();
        assert_eq!(gb.data(), &[2.0, 2.0]);
    }
}
