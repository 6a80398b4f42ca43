//! Continuous state-space parameters and zero-order-hold discretization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Below this magnitude of `Δ·A` the hold factor uses its series limit.
pub const SERIES_THRESHOLD: f64 = 1e-8;

/// Single-channel continuous parameters with diagonal `A`.
///
/// `b` and `c` hold either `N` values (time-invariant) or `T·N` values
/// (one row per step); `delta` holds 1 or `T` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SsmParams<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub delta: Vec<T>,
}

/// Discretized transition `Ā` and input gain `B̄`, each `steps × N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DiscreteSsmParams<T> {
    pub n_state: usize,
    pub steps: usize,
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

/// Hidden state `h` of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState<T>(pub Vec<T>);

impl<T: Scalar> HiddenState<T> {
    pub fn zeros(n_state: usize) -> Self {
        Self(vec![T::zero(); n_state])
    }

    pub fn norm(&self) -> T {
        self.0.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

impl<T: Scalar> SsmParams<T> {
    pub fn n_state(&self) -> usize {
        self.a.len()
    }

    /// Number of distinct time steps the parameters describe (1 when
    /// time-invariant).
    pub fn steps(&self) -> Result<usize> {
        let n = self.n_state();
        if n == 0 {
            return Err(Error::Parameter("state size must be >= 1".into()));
        }
        let mut steps = 1;
        for (what, len) in [("b", self.b.len() / n), ("c", self.c.len() / n), ("delta", self.delta.len())] {
            if len == 0 {
                return Err(Error::Parameter(format!("{what} is empty")));
            }
            if len != 1 {
                if steps != 1 && steps != len {
                    return Err(Error::Parameter(format!("{what} has {len} steps, expected {steps}")));
                }
                steps = len;
            }
        }
        if self.b.len() % n != 0 || self.c.len() % n != 0 {
            return Err(Error::Parameter("b/c length is not a multiple of N".into()));
        }
        Ok(steps)
    }

    /// Row `t` of `c` (the only row for time-invariant parameters).
    pub fn c_at(&self, t: usize) -> &[T] {
        let n = self.n_state();
        let rows = self.c.len() / n;
        let r = if rows == 1 { 0 } else { t };
        &self.c[r * n..(r + 1) * n]
    }
}

/// `(e^x − 1)/x`, the zero-order-hold gain factor, with its series limit
/// near zero.
#[inline]
pub fn hold_factor<T: Scalar>(x: T) -> T {
    let ax = x.abs();
    if ax < T::of(SERIES_THRESHOLD) {
        T::one() + x / T::of(2.0)
    } else if ax < T::of(0.5) {
        // Σ x^k/(k+1)!, truncated well below f64 round-off
        let mut acc = T::zero();
        for &c in INV_FACTORIALS.iter().rev() {
            acc = acc * x + T::of(c);
        }
        acc
    } else {
        x.exp_m1() / x
    }
}

/// `1/(k+1)!` for `k = 0..17`.
const INV_FACTORIALS: [f64; 18] = {
    let mut out = [0.0; 18];
    let mut f = 1.0;
    let mut k = 0;
    while k < 18 {
        f *= (k + 1) as f64;
        out[k] = 1.0 / f;
        k += 1;
    }
    out
};

/// Derivative of [`hold_factor`].
#[inline]
pub fn hold_factor_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::of(1e-3) {
        T::of(0.5) + x / T::of(3.0) + x * x / T::of(8.0) + x * x * x / T::of(30.0)
    } else {
        (x * x.exp() - x.exp_m1()) / (x * x)
    }
}

/// Zero-order hold: `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − I)·ΔB`, elementwise
/// for diagonal `A`.
pub fn zoh_discretize<T: Scalar>(params: &SsmParams<T>) -> Result<DiscreteSsmParams<T>> {
    let steps = params.steps()?;
    if let Some(bad) = params.delta.iter().find(|&&d| !(d > T::zero())) {
        return Err(Error::Parameter(format!("step size must be positive, got {bad}")));
    }
    let n = params.n_state();
    let b_rows = params.b.len() / n;
    let mut a_bar = Vec::with_capacity(steps * n);
    let mut b_bar = Vec::with_capacity(steps * n);
    for t in 0..steps {
        let delta = params.delta[if params.delta.len() == 1 { 0 } else { t }];
        let b_row = if b_rows == 1 { 0 } else { t };
        for i in 0..n {
            let x = delta * params.a[i];
            a_bar.push(x.exp());
            b_bar.push(delta * hold_factor(x) * params.b[b_row * n + i]);
        }
    }
    Ok(DiscreteSsmParams {
        n_state: n,
        steps,
        a_bar,
        b_bar,
    })
}

impl<T: Scalar> DiscreteSsmParams<T> {
    /// `(Ā_t, B̄_t)` rows for step `t`.
    pub fn at(&self, t: usize) -> (&[T], &[T]) {
        let r = if self.steps == 1 { 0 } else { t };
        let n = self.n_state;
        (&self.a_bar[r * n..(r + 1) * n], &self.b_bar[r * n..(r + 1) * n])
    }
}
