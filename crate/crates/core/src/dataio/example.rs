use std::fmt;

use super::annotation::ClipAnnotation;
use super::features::FeatureSequence;
use crate::action::{Action, ActionSequence};
use crate::encoder::MemorySequence;
use crate::error::Result;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Why a cut point yields no example.
#[derive(Clone, Debug, PartialEq)]
pub enum SkipReason {
    NoObservation { cut_s: f64 },
    TooFewFutureActions { cut_s: f64, have: usize, need: usize },
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::NoObservation { cut_s } => write!(f, "no complete window before {cut_s:.3} s"),
            SkipReason::TooFewFutureActions { cut_s, have, need } => {
                write!(f, "{have} actions after {cut_s:.3} s, need {need}")
            }
        }
    }
}

/// Memory and targets for one cut point.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub clip_id: String,
    pub cut_s: f64,
    pub memory: MemorySequence<T>,
    pub targets: ActionSequence,
    /// Action under each memory row; `None` on padding.
    pub frame_labels: Vec<Option<Action>>,
}

/// Windows ending before `cut_s` fill the memory right-aligned; the first
/// `Z` events starting at or after `cut_s` are the targets.
pub fn make_example<T: Scalar>(
    annotation: &ClipAnnotation,
    features: &FeatureSequence,
    cut_s: f64,
    long_len: usize,
    short_len: usize,
    z: usize,
) -> Result<std::result::Result<Example<T>, SkipReason>> {
    let win = features.window_seconds;
    let observed = (((cut_s / win) + 1e-9).floor().max(0.0) as usize).min(features.num_windows());
    if observed == 0 {
        return Ok(Err(SkipReason::NoObservation { cut_s }));
    }
    let targets: ActionSequence = annotation
        .events
        .iter()
        .filter(|e| e.start_s >= cut_s - 1e-9)
        .take(z)
        .map(|e| e.action())
        .collect();
    if targets.len() < z {
        return Ok(Err(SkipReason::TooFewFutureActions {
            cut_s,
            have: targets.len(),
            need: z,
        }));
    }

    let rows = long_len + short_len;
    let d = features.dim();
    let used = observed.min(rows);
    let first_window = observed - used;
    let pad = rows - used;
    let mut data = vec![T::zero(); rows * d];
    let mut mask = vec![false; rows];
    let mut frame_labels = vec![None; rows];
    for r in 0..used {
        let w = first_window + r;
        let dst = &mut data[(pad + r) * d..(pad + r + 1) * d];
        for (o, &x) in dst.iter_mut().zip(features.embeddings.row(w)) {
            *o = T::of(x as f64);
        }
        mask[pad + r] = true;
        frame_labels[pad + r] = annotation.event_at((w as f64 + 0.5) * win).map(|e| e.action());
    }
    let memory = MemorySequence::with_mask(Tensor::new(vec![rows, d], data)?, long_len, short_len, mask)?;
    Ok(Ok(Example {
        clip_id: annotation.clip_id.clone(),
        cut_s,
        memory,
        targets,
        frame_labels,
    }))
}

/// Event start times with at least `min_observed` windows before them and
/// `z` events from them on, thinned to at most `max_cuts` evenly spaced
/// picks.
pub fn candidate_cuts(
    annotation: &ClipAnnotation,
    window_seconds: f64,
    min_observed: usize,
    z: usize,
    max_cuts: usize,
) -> Vec<f64> {
    let n = annotation.events.len();
    let valid: Vec<f64> = annotation
        .events
        .iter()
        .enumerate()
        .filter(|(i, e)| n - i >= z && ((e.start_s / window_seconds) + 1e-9).floor() as usize >= min_observed.max(1))
        .map(|(_, e)| e.start_s)
        .collect();
    if valid.len() <= max_cuts {
        return valid;
    }
    if max_cuts == 1 {
        return vec![valid[valid.len() / 2]];
    }
    (0..max_cuts)
        .map(|i| valid[i * (valid.len() - 1) / (max_cuts - 1)])
        .collect()
}
