use serde::{Deserialize, Serialize};

use crate::dataio::Example;
use crate::error::{Error, Result};
use crate::interaction::{ActionTaxonomy, DecodeMode};
use crate::metrics::evaluate_dataset;
use crate::scalar::Scalar;

use super::config::TrainConfig;
use super::infer::{infer, prediction_map, truths, InferOptions};
use super::model::QueryMamba;
use super::train::{train, LossRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub action_loss: bool,
    pub verb_ed: f64,
    pub noun_ed: f64,
    pub action_ed: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub num_clips: usize,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("action_loss,verb_ed,noun_ed,action_ed\n");
        for r in &self.rows {
            s += &format!("{},{:.4},{:.4},{:.4}\n", r.action_loss, r.verb_ed, r.noun_ed, r.action_ed);
        }
        s
    }
}

/// Trains with and without the action loss and scores both on `val` with
/// per-slot maximum-probability predictions and no interaction. The model
/// with the action head reads its pairs off the action distribution.
pub fn run_action_loss_ablation<T: Scalar>(
    config: &TrainConfig,
    train_examples: &[Example<T>],
    val_examples: &[Example<T>],
    taxonomy: &ActionTaxonomy,
) -> Result<AblationReport> {
    if taxonomy.is_empty() {
        return Err(Error::Config("the ablation needs a non-empty taxonomy".into()));
    }
    let truth = truths(val_examples);
    let mut rows = Vec::new();
    for action_loss in [true, false] {
        let cfg = TrainConfig {
            loss_action: action_loss,
            ..config.clone()
        };
        let mut model = QueryMamba::<T>::new(cfg, Some(taxonomy.clone()))?;
        let state = train(&mut model, train_examples)?;
        let options = InferOptions {
            decode_mode: DecodeMode::Argmax,
            k: 1,
            use_interaction: false,
            seed: config.seed,
        };
        let preds = infer(&model, val_examples, None, &options)?;
        let report = evaluate_dataset(&prediction_map(&preds), &truth)?;
        rows.push(AblationRow {
            action_loss,
            verb_ed: report.verb_ed,
            noun_ed: report.noun_ed,
            action_ed: report.action_ed,
            final_loss: state.curve.last().map_or(f64::NAN, |r: &LossRecord| r.loss),
        });
    }
    Ok(AblationReport {
        rows,
        num_clips: truth.len(),
    })
}
