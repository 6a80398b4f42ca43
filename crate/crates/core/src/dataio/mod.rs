//! Annotation and feature files, the synthetic action world and example
//! construction.

mod annotation;
mod ego4d;
mod example;
mod features;
mod world;

use std::fs;
use std::io::BufReader;
use std::path::Path;

use rayon::prelude::*;

pub use annotation::{read_annotations, write_annotations, ClipAnnotation, Event};
pub use ego4d::read_ego4d_lta;
pub use example::{candidate_cuts, make_example, Example, SkipReason};
pub use features::{FeatureSequence, FeatureSidecar, WINDOW_SECONDS};
pub use world::{generate_clip, generate_world, generate_world_with, SyntheticWorldSpec, WorldOptions};

use crate::error::Result;
use crate::rng::{derive_index, derive_seed};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FEATURES_DIR: &str = "features";
pub const WORLD_FILE: &str = "world.json";

/// Clip counts and length for [`generate_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetShape {
    pub train_clips: usize,
    pub val_clips: usize,
    pub duration_s: f64,
    pub min_events: usize,
}

/// Annotations and features held in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub clips: Vec<ClipAnnotation>,
    pub features: Vec<FeatureSequence>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Dataset {
        let (clips, features) = self
            .clips
            .iter()
            .zip(&self.features)
            .filter(|(c, _)| c.split == name)
            .map(|(c, f)| (c.clone(), f.clone()))
            .unzip();
        Dataset { clips, features }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_annotations(fs::File::create(dir.join(ANNOTATIONS_FILE))?, &self.clips)?;
        let fdir = dir.join(FEATURES_DIR);
        for f in &self.features {
            f.save(&fdir)?;
        }
        Ok(())
    }

    /// Reads `annotations.jsonl` and each clip's features from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let clips = read_annotations(BufReader::new(fs::File::open(dir.join(ANNOTATIONS_FILE))?))?;
        let fdir = dir.join(FEATURES_DIR);
        let features = clips
            .iter()
            .map(|c| FeatureSequence::load(&fdir, &c.clip_id))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clips, features })
    }
}

/// Training then validation clips, each from its own derived seed.
pub fn generate_dataset(world: &SyntheticWorldSpec, seed: u64, shape: &DatasetShape) -> Result<Dataset> {
    let base = derive_seed(seed, "clips");
    let total = shape.train_clips + shape.val_clips;
    let pairs = (0..total)
        .into_par_iter()
        .map(|i| {
            let (split, id) = if i < shape.train_clips {
                ("train", format!("train_{i:05}"))
            } else {
                ("val", format!("val_{:05}", i - shape.train_clips))
            };
            let (mut clip, feats) = generate_clip(world, &id, derive_index(base, i as u64), shape.duration_s, shape.min_events)?;
            clip.split = split.to_string();
            Ok((clip, feats))
        })
        .collect::<Result<Vec<_>>>()?;
    let (clips, features) = pairs.into_iter().unzip();
    Ok(Dataset { clips, features })
}

#[cfg(test)]
mod tests;
