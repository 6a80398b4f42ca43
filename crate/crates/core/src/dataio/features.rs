use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Seconds covered by one 16-frame window at 30 fps.
pub const WINDOW_SECONDS: f64 = 0.533;

/// One embedding row per observation window.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub clip_id: String,
    pub window_seconds: f64,
    pub embeddings: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub clip_id: String,
    pub num_windows: usize,
    pub dim: usize,
    pub window_seconds: f64,
    pub dtype: String,
}

impl FeatureSequence {
    pub fn num_windows(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.last_dim()
    }

    pub fn bin_path(dir: &Path, clip_id: &str) -> PathBuf {
        dir.join(format!("{clip_id}.bin"))
    }

    pub fn sidecar_path(dir: &Path, clip_id: &str) -> PathBuf {
        dir.join(format!("{clip_id}.json"))
    }

    /// Writes `<clip_id>.bin` (little-endian f32, row-major) and the
    /// `<clip_id>.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let bytes: Vec<u8> = self.embeddings.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(Self::bin_path(dir, &self.clip_id), bytes)?;
        let sidecar = FeatureSidecar {
            clip_id: self.clip_id.clone(),
            num_windows: self.num_windows(),
            dim: self.dim(),
            window_seconds: self.window_seconds,
            dtype: "f32le".into(),
        };
        fs::write(Self::sidecar_path(dir, &self.clip_id), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, clip_id: &str) -> Result<Self> {
        let side_path = Self::sidecar_path(dir, clip_id);
        let sidecar: FeatureSidecar = serde_json::from_slice(&fs::read(&side_path)?)?;
        let location = side_path.display().to_string();
        if sidecar.clip_id != clip_id || sidecar.dtype != "f32le" {
            return Err(Error::Ingest {
                location,
                message: format!("sidecar describes {} ({})", sidecar.clip_id, sidecar.dtype),
            });
        }
        let bytes = fs::read(Self::bin_path(dir, clip_id))?;
        if bytes.len() != 4 * sidecar.num_windows * sidecar.dim {
            return Err(Error::Ingest {
                location,
                message: format!(
                    "expected {}x{} floats, found {} bytes",
                    sidecar.num_windows,
                    sidecar.dim,
                    bytes.len()
                ),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            clip_id: clip_id.to_string(),
            window_seconds: sidecar.window_seconds,
            embeddings: Tensor::new(vec![sidecar.num_windows, sidecar.dim], data)?,
        })
    }
}
