use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::action::{Action, ActionSequence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub start_s: f64,
    pub end_s: f64,
    pub verb_id: usize,
    pub noun_id: usize,
}

impl Event {
    pub fn action(&self) -> Action {
        Action::new(self.verb_id, self.noun_id)
    }
}

fn default_split() -> String {
    "train".into()
}

/// Time-ordered action events of one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipAnnotation {
    pub clip_id: String,
    #[serde(default = "default_split")]
    pub split: String,
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub duration_s: f64,
    pub events: Vec<Event>,
}

impl ClipAnnotation {
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Ingest {
            location: format!("clip {}", self.clip_id),
            message,
        };
        let mut last_end = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            if !(e.start_s.is_finite() && e.end_s.is_finite()) || e.end_s < e.start_s {
                return Err(bad(format!("event {i} has bounds [{}, {}]", e.start_s, e.end_s)));
            }
            if e.start_s < last_end {
                return Err(bad(format!("event {i} starts before the previous one ends")));
            }
            if e.verb_id >= self.num_verbs || e.noun_id >= self.num_nouns {
                return Err(bad(format!(
                    "event {i} pair ({}, {}) outside {}x{}",
                    e.verb_id, e.noun_id, self.num_verbs, self.num_nouns
                )));
            }
            last_end = e.end_s;
        }
        Ok(())
    }

    pub fn actions(&self) -> ActionSequence {
        self.events.iter().map(Event::action).collect()
    }

    /// Event covering time `t`, if any.
    pub fn event_at(&self, t: f64) -> Option<&Event> {
        let i = self.events.partition_point(|e| e.end_s <= t);
        self.events.get(i).filter(|e| e.start_s <= t)
    }
}

pub fn write_annotations<W: Write>(mut w: W, clips: &[ClipAnnotation]) -> Result<()> {
    for c in clips {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a JSON-lines annotation stream.
pub fn read_annotations<R: BufRead>(r: R) -> Result<Vec<ClipAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let clip: ClipAnnotation = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            location: format!("annotations line {}", i + 1),
            message: e.to_string(),
        })?;
        clip.validate()?;
        out.push(clip);
    }
    Ok(out)
}
