//! Evaluation of the discrete recurrence `h_t = Ā h_{t−1} + B̄ x_t`,
//! `y_t = C h_t`, either step by step or as an associative prefix scan.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{DiscreteSsmParams, HiddenState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

/// Elements per block in the chunked parallel scan. Fixed so the reduction
/// order (and therefore the rounding) does not depend on the thread count.
pub const SCAN_CHUNK: usize = 256;

/// The affine map `h ↦ a·h + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine<T> {
    pub a: T,
    pub b: T,
}

impl<T: Scalar> Affine<T> {
    pub const fn new(a: T, b: T) -> Self {
        Self { a, b }
    }

    /// Composition: apply `self` first, then `later`:
    /// `(a₂a₁, a₂b₁ + b₂)`.
    #[inline]
    pub fn then(self, later: Self) -> Self {
        Self {
            a: later.a * self.a,
            b: later.a * self.b + later.b,
        }
    }

    #[inline]
    pub fn apply(self, h: T) -> T {
        self.a * h + self.b
    }
}

/// In-place inclusive scan under an associative `combine(earlier, later)`.
///
/// Blocks of `chunk` elements are scanned independently in parallel, block
/// totals are scanned serially, and each block is then offset by the total of
/// everything before it.
pub fn inclusive_scan<E, F>(items: &mut [E], chunk: usize, combine: F)
where
    E: Copy + Send + Sync,
    F: Fn(E, E) -> E + Sync,
{
    let chunk = chunk.max(1);
    if items.is_empty() {
        return;
    }
    items.par_chunks_mut(chunk).for_each(|block| {
        for i in 1..block.len() {
            block[i] = combine(block[i - 1], block[i]);
        }
    });
    let totals: Vec<E> = items.chunks(chunk).map(|b| b[b.len() - 1]).collect();
    let mut carries = Vec::with_capacity(totals.len());
    let mut running: Option<E> = None;
    for &t in &totals {
        carries.push(running);
        running = Some(match running {
            Some(r) => combine(r, t),
            None => t,
        });
    }
    items
        .par_chunks_mut(chunk)
        .zip(carries.par_iter())
        .for_each(|(block, carry)| {
            if let Some(c) = *carry {
                for e in block.iter_mut() {
                    *e = combine(c, *e);
                }
            }
        });
}

fn validate<T: Scalar>(len: usize, disc: &DiscreteSsmParams<T>, c: &[T], h0: Option<&HiddenState<T>>) -> Result<()> {
    let n = disc.n_state;
    if disc.steps != 1 && disc.steps != len {
        return Err(Error::dim("ssm scan (steps vs input)", &[disc.steps], &[len]));
    }
    if c.len() != n && c.len() != n * len {
        return Err(Error::dim("ssm scan (C)", &[c.len()], &[n]));
    }
    if let Some(h) = h0 {
        if h.0.len() != n {
            return Err(Error::dim("ssm scan (h0)", &[h.0.len()], &[n]));
        }
    }
    Ok(())
}

fn c_row<T>(c: &[T], n: usize, t: usize) -> &[T] {
    if c.len() == n {
        c
    } else {
        &c[t * n..(t + 1) * n]
    }
}

fn readout<T: Scalar>(states: &[T], c: &[T], n: usize) -> Vec<T> {
    states
        .chunks(n)
        .enumerate()
        .map(|(t, h)| h.iter().zip(c_row(c, n, t)).map(|(&h, &c)| h * c).sum())
        .collect()
}

/// All hidden states `h_1..h_T` (row-major `T × N`), step by step.
pub fn hidden_states_sequential<T: Scalar>(
    x: &[T],
    disc: &DiscreteSsmParams<T>,
    h0: Option<&HiddenState<T>>,
) -> Vec<T> {
    let n = disc.n_state;
    let mut h = h0.map_or_else(|| vec![T::zero(); n], |h| h.0.clone());
    let mut out = Vec::with_capacity(x.len() * n);
    for (t, &xt) in x.iter().enumerate() {
        let (a_bar, b_bar) = disc.at(t);
        for i in 0..n {
            h[i] = a_bar[i] * h[i] + b_bar[i] * xt;
        }
        out.extend_from_slice(&h);
    }
    out
}

/// All hidden states via the associative scan over affine maps.
pub fn hidden_states_parallel<T: Scalar>(
    x: &[T],
    disc: &DiscreteSsmParams<T>,
    h0: Option<&HiddenState<T>>,
) -> Vec<T> {
    let n = disc.n_state;
    let len = x.len();
    let mut out = vec![T::zero(); len * n];
    let columns: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut maps: Vec<Affine<T>> = x
                .iter()
                .enumerate()
                .map(|(t, &xt)| {
                    let (a_bar, b_bar) = disc.at(t);
                    Affine::new(a_bar[i], b_bar[i] * xt)
                })
                .collect();
            inclusive_scan(&mut maps, SCAN_CHUNK, Affine::then);
            let start = h0.map_or(T::zero(), |h| h.0[i]);
            maps.into_iter().map(|m| m.apply(start)).collect()
        })
        .collect();
    for (i, col) in columns.into_iter().enumerate() {
        for (t, v) in col.into_iter().enumerate() {
            out[t * n + i] = v;
        }
    }
    out
}

/// `y_t = C h_t` with `h_t = Ā h_{t−1} + B̄ x_t`, evaluated in order.
/// `c` holds `N` or `T·N` values; `h0` defaults to zero.
pub fn ssm_scan_sequential<T: Scalar>(
    x: &[T],
    disc: &DiscreteSsmParams<T>,
    c: &[T],
    h0: Option<&HiddenState<T>>,
) -> Result<Vec<T>> {
    validate(x.len(), disc, c, h0)?;
    let states = hidden_states_sequential(x, disc, h0);
    Ok(readout(&states, c, disc.n_state))
}

/// Same contract as [`ssm_scan_sequential`], computed with [`inclusive_scan`].
pub fn ssm_scan_parallel<T: Scalar>(
    x: &[T],
    disc: &DiscreteSsmParams<T>,
    c: &[T],
    h0: Option<&HiddenState<T>>,
) -> Result<Vec<T>> {
    validate(x.len(), disc, c, h0)?;
    let states = hidden_states_parallel(x, disc, h0);
    Ok(readout(&states, c, disc.n_state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(a: Vec<f64>, b: Vec<f64>, steps: usize) -> DiscreteSsmParams<f64> {
        DiscreteSsmParams {
            n_state: a.len() / steps,
            steps,
            a_bar: a,
            b_bar: b,
        }
    }

    #[test]
    fn unit_recurrence_is_prefix_sum() {
        let x = [1.0, 2.0, -3.0, 0.5];
        let d = disc(vec![1.0], vec![1.0], 1);
        let y = ssm_scan_sequential(&x, &d, &[1.0], None).unwrap();
        assert_eq!(y, vec![1.0, 3.0, 0.0, 0.5]);
        assert_eq!(ssm_scan_parallel(&x, &d, &[1.0], None).unwrap(), y);
    }

    #[test]
    fn zero_transition_is_memoryless() {
        let x = [1.0, 2.0, -3.0];
        let d = disc(vec![0.0], vec![2.0], 1);
        let y = ssm_scan_sequential(&x, &d, &[0.5], None).unwrap();
        assert_eq!(y, vec![1.0, 2.0, -3.0]);
    }

    #[test]
    fn empty_sequence_gives_empty_output() {
        let d = disc(vec![0.5], vec![1.0], 1);
        assert!(ssm_scan_sequential(&[], &d, &[1.0], None).unwrap().is_empty());
        assert!(ssm_scan_parallel(&[], &d, &[1.0], None).unwrap().is_empty());
    }

    #[test]
    fn initial_state_is_used() {
        let d = disc(vec![0.5], vec![1.0], 1);
        let h0 = HiddenState(vec![4.0]);
        let y = ssm_scan_sequential(&[0.0, 0.0], &d, &[1.0], Some(&h0)).unwrap();
        assert_eq!(y, vec![2.0, 1.0]);
        let yp = ssm_scan_parallel(&[0.0, 0.0], &d, &[1.0], Some(&h0)).unwrap();
        assert_eq!(yp, y);
    }

    #[test]
    fn chunked_scan_matches_serial_fold_for_integers() {
        for chunk in [1, 2, 3, 7, 64] {
            let mut v: Vec<i64> = (1..=100).collect();
            inclusive_scan(&mut v, chunk, |a, b| a + b);
            let expected: Vec<i64> = (1..=100).map(|k| k * (k + 1) / 2).collect();
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn shape_errors() {
        let d = disc(vec![0.5, 0.5], vec![1.0, 1.0], 2);
        assert!(ssm_scan_sequential(&[1.0, 2.0, 3.0], &d, &[1.0], None).is_err());
    }
}
