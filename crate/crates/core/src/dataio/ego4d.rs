//! Reader for the Ego4D long-term anticipation annotation JSON.

use std::collections::BTreeMap;

use serde::Deserialize;

use super::annotation::{ClipAnnotation, Event};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct LtaFile {
    clips: Vec<LtaEntry>,
}

#[derive(Deserialize)]
struct LtaEntry {
    clip_uid: String,
    action_idx: usize,
    verb_label: Option<usize>,
    noun_label: Option<usize>,
    action_clip_start_sec: f64,
    action_clip_end_sec: f64,
}

/// Groups `clips` entries by `clip_uid` and orders each clip's events by
/// `action_idx`. Entries without labels (the test split) are rejected, and
/// an event overlapping its predecessor is trimmed to start where it ends.
pub fn read_ego4d_lta(json: &str, split: &str, num_verbs: usize, num_nouns: usize) -> Result<Vec<ClipAnnotation>> {
    let file: LtaFile = serde_json::from_str(json)?;
    let mut grouped: BTreeMap<String, Vec<LtaEntry>> = BTreeMap::new();
    for e in file.clips {
        grouped.entry(e.clip_uid.clone()).or_default().push(e);
    }
    grouped
        .into_iter()
        .map(|(clip_id, mut entries)| {
            entries.sort_by_key(|e| e.action_idx);
            let mut last_end = f64::NEG_INFINITY;
            let events = entries
                .iter()
                .map(|e| match (e.verb_label, e.noun_label) {
                    (Some(verb_id), Some(noun_id)) => {
                        let start_s = e.action_clip_start_sec.max(last_end);
                        let end_s = e.action_clip_end_sec.max(start_s);
                        last_end = end_s;
                        Ok(Event {
                            start_s,
                            end_s,
                            verb_id,
                            noun_id,
                        })
                    }
                    _ => Err(Error::Ingest {
                        location: format!("clip {clip_id} action {}", e.action_idx),
                        message: "missing verb or noun label".into(),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            let clip = ClipAnnotation {
                duration_s: events.last().map_or(0.0, |e| e.end_s),
                clip_id,
                split: split.to_string(),
                num_verbs,
                num_nouns,
                events,
            };
            clip.validate()?;
            Ok(clip)
        })
        .collect()
}
