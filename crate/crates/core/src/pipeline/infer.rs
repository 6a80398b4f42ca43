use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::action::{Action, ActionSequence};
use crate::dataio::Example;
use crate::error::{Error, Result};
use crate::interaction::{
    apply_interaction, argmax_sequence, joint_probabilities, sample_sequences, CooccurrenceMatrix, DecodeMode,
};
use crate::metrics::PredictionRecord;
use crate::rng::{derive_seed, rng_for};
use crate::scalar::Scalar;

use super::model::QueryMamba;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub decode_mode: DecodeMode,
    pub k: usize,
    pub use_interaction: bool,
    pub seed: u64,
}

impl InferOptions {
    pub fn from_config<T: Scalar>(model: &QueryMamba<T>) -> Self {
        Self {
            decode_mode: model.config.decode_mode,
            k: model.config.k,
            use_interaction: model.config.use_interaction,
            seed: model.config.seed,
        }
    }
}

fn check_vocab<T: Scalar>(model: &QueryMamba<T>, cooc: &CooccurrenceMatrix) -> Result<()> {
    let (v, n) = (model.config.num_verbs, model.config.num_nouns);
    if (cooc.num_verbs, cooc.num_nouns) != (v, n) {
        return Err(Error::Config(format!(
            "co-occurrence matrix is {}x{} but the model predicts {v}x{n}",
            cooc.num_verbs, cooc.num_nouns
        )));
    }
    Ok(())
}

/// Candidate sequences for one example. Sampling draws from a stream keyed
/// by the seed and clip id, so runs with and without interaction see the
/// same randomness.
pub fn predict_example<T: Scalar>(
    model: &QueryMamba<T>,
    example: &Example<T>,
    cooc: Option<&CooccurrenceMatrix>,
    options: &InferOptions,
) -> Result<Vec<ActionSequence>> {
    let preds = model.predict(&example.memory)?;
    if options.decode_mode == DecodeMode::Argmax && model.has_action_head() {
        return Ok(vec![model.argmax_actions(&preds)?]);
    }
    let joint = joint_probabilities(&renormalize(&preds.verbs), &renormalize(&preds.nouns))?;
    let dist = if options.use_interaction {
        let cooc = cooc.ok_or_else(|| Error::Config("interaction enabled without a co-occurrence file".into()))?;
        check_vocab(model, cooc)?;
        apply_interaction(&joint, cooc)?.adjusted
    } else {
        joint
    };
    match options.decode_mode {
        DecodeMode::Argmax => Ok(vec![argmax_sequence(&dist)?]),
        DecodeMode::Sample => {
            let mut rng = rng_for(derive_seed(options.seed, "sample"), &example.clip_id);
            sample_sequences(&dist, options.k, &mut rng)
        }
    }
}

/// Softmax rows in f64, renormalized so they pass the distribution checks
/// even when computed in f32.
fn renormalize<T: Scalar>(probs: &crate::numerics::Tensor<T>) -> crate::numerics::Tensor<f64> {
    let mut t = probs.cast::<f64>();
    let cols = t.last_dim();
    for row in t.data_mut().chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    t
}

/// One prediction record per example, ordered by clip id.
pub fn infer<T: Scalar>(
    model: &QueryMamba<T>,
    examples: &[Example<T>],
    cooc: Option<&CooccurrenceMatrix>,
    options: &InferOptions,
) -> Result<Vec<PredictionRecord>> {
    if let Some(c) = cooc {
        check_vocab(model, c)?;
    }
    let mut out = examples
        .iter()
        .map(|ex| {
            Ok(PredictionRecord {
                clip_id: ex.clip_id.clone(),
                candidates: predict_example(model, ex, cooc, options)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    if out.windows(2).any(|w| w[0].clip_id == w[1].clip_id) {
        return Err(Error::Invalid("several examples share a clip id".into()));
    }
    Ok(out)
}

/// Ground-truth map for [`crate::metrics::evaluate_dataset`].
pub fn truths<T>(examples: &[Example<T>]) -> BTreeMap<String, ActionSequence> {
    examples.iter().map(|e| (e.clip_id.clone(), e.targets.clone())).collect()
}

pub fn prediction_map(records: &[PredictionRecord]) -> BTreeMap<String, Vec<ActionSequence>> {
    records.iter().map(|r| (r.clip_id.clone(), r.candidates.clone())).collect()
}

/// Predicts, for every slot, the pair seen most often at that slot in the
/// training targets (smallest pair on ties).
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalBaseline {
    pub slots: ActionSequence,
}

impl MarginalBaseline {
    pub fn fit<T>(examples: &[Example<T>]) -> Result<Self> {
        let z = examples
            .first()
            .ok_or_else(|| Error::Invalid("no examples for the baseline".into()))?
            .targets
            .len();
        let mut counts: Vec<BTreeMap<Action, usize>> = vec![BTreeMap::new(); z];
        for ex in examples {
            if ex.targets.len() != z {
                return Err(Error::dim("baseline targets", &[ex.targets.len()], &[z]));
            }
            for (slot, &a) in counts.iter_mut().zip(&ex.targets.0) {
                *slot.entry(a).or_default() += 1;
            }
        }
        let slots = counts
            .iter()
            .map(|c| {
                let mut best = (Action::new(0, 0), 0);
                for (&a, &n) in c {
                    if n > best.1 {
                        best = (a, n);
                    }
                }
                best.0
            })
            .collect();
        Ok(Self { slots })
    }

    pub fn predict<T>(&self, examples: &[Example<T>]) -> Vec<PredictionRecord> {
        let mut out: Vec<PredictionRecord> = examples
            .iter()
            .map(|e| PredictionRecord {
                clip_id: e.clip_id.clone(),
                candidates: vec![self.slots.clone()],
            })
            .collect();
        out.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        out
    }
}
