//! Normalized edit distance between action sequences, best-of-K selection and
//! dataset aggregation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::action::ActionSequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Action,
    Verb,
    Noun,
}

impl View {
    pub const ALL: [View; 3] = [View::Verb, View::Noun, View::Action];
}

/// Unit-cost Levenshtein distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance under `view`, divided by the sequence length.
pub fn edit_distance(pred: &ActionSequence, truth: &ActionSequence, view: View) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim("edit_distance", &[pred.len()], &[truth.len()]));
    }
    if truth.is_empty() {
        return Err(Error::Invalid("edit distance of empty sequences".into()));
    }
    let d = match view {
        View::Action => levenshtein(&pred.0, &truth.0),
        View::Verb => levenshtein(&pred.verbs(), &truth.verbs()),
        View::Noun => levenshtein(&pred.nouns(), &truth.nouns()),
    };
    Ok(d as f64 / truth.len() as f64)
}

/// Smallest distance among the candidates and the index attaining it (first
/// on ties).
pub fn min_over_k(preds: &[ActionSequence], truth: &ActionSequence, view: View) -> Result<(f64, usize)> {
    if preds.is_empty() {
        return Err(Error::Invalid("no candidate sequences".into()));
    }
    let mut best = (f64::INFINITY, 0);
    for (k, p) in preds.iter().enumerate() {
        let d = edit_distance(p, truth, view)?;
        if d < best.0 {
            best = (d, k);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip_id: String,
    pub verb_ed: f64,
    pub noun_ed: f64,
    pub action_ed: f64,
    /// Best candidate index for verb, noun and action views.
    pub best_k: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditDistanceReport {
    pub verb_ed: f64,
    pub noun_ed: f64,
    pub action_ed: f64,
    pub num_clips: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_clip: Vec<ClipScore>,
}

impl EditDistanceReport {
    /// The four summary fields only.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "verb_ed": self.verb_ed,
            "noun_ed": self.noun_ed,
            "action_ed": self.action_ed,
            "num_clips": self.num_clips,
        })
    }
}

pub fn score_clip(clip_id: &str, preds: &[ActionSequence], truth: &ActionSequence) -> Result<ClipScore> {
    let (verb_ed, kv) = min_over_k(preds, truth, View::Verb)?;
    let (noun_ed, kn) = min_over_k(preds, truth, View::Noun)?;
    let (action_ed, ka) = min_over_k(preds, truth, View::Action)?;
    Ok(ClipScore {
        clip_id: clip_id.to_string(),
        verb_ed,
        noun_ed,
        action_ed,
        best_k: [kv, kn, ka],
    })
}

/// Unweighted mean of per-clip best-of-K distances. The two maps must have
/// the same keys.
pub fn evaluate_dataset(
    predictions: &BTreeMap<String, Vec<ActionSequence>>,
    truths: &BTreeMap<String, ActionSequence>,
) -> Result<EditDistanceReport> {
    let mut missing: Vec<String> = truths
        .keys()
        .filter(|k| !predictions.contains_key(*k))
        .chain(predictions.keys().filter(|k| !truths.contains_key(*k)))
        .cloned()
        .collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::MissingClips(missing));
    }
    if truths.is_empty() {
        return Err(Error::Invalid("no clips to evaluate".into()));
    }
    let per_clip = truths
        .iter()
        .map(|(id, t)| score_clip(id, &predictions[id], t))
        .collect::<Result<Vec<_>>>()?;
    let n = per_clip.len() as f64;
    let mean = |f: fn(&ClipScore) -> f64| per_clip.iter().map(f).sum::<f64>() / n;
    Ok(EditDistanceReport {
        verb_ed: mean(|c| c.verb_ed),
        noun_ed: mean(|c| c.noun_ed),
        action_ed: mean(|c| c.action_ed),
        num_clips: per_clip.len(),
        per_clip,
    })
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub clip_id: String,
    pub candidates: Vec<ActionSequence>,
}

pub fn write_predictions<W: Write>(mut w: W, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<BTreeMap<String, Vec<ActionSequence>>> {
    let mut out = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            location: format!("predictions line {}", i + 1),
            message: e.to_string(),
        })?;
        if out.insert(rec.clip_id.clone(), rec.candidates).is_some() {
            return Err(Error::Ingest {
                location: format!("predictions line {}", i + 1),
                message: format!("duplicate clip {}", rec.clip_id),
            });
        }
    }
    Ok(out)
}
