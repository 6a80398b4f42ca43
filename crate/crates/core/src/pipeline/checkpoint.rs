use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::ActionTaxonomy;
use crate::nn::ParamStore;
use crate::scalar::Scalar;

use super::config::TrainConfig;
use super::model::QueryMamba;
use super::train::TrainState;

pub const CHECKPOINT_FORMAT: &str = "querymamba-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Weights, configuration and optimizer state. Training randomness is a
/// pure function of the config seed and step, so no generator state needs
/// saving beyond the step count.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub config: TrainConfig,
    pub taxonomy: Option<ActionTaxonomy>,
    pub params: ParamStore<T>,
    pub state: TrainState<T>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    scalar: String,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: &QueryMamba<T>, state: TrainState<T>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.into(),
            config: model.config.clone(),
            taxonomy: model.taxonomy.clone(),
            params: model.store.clone(),
            state,
        }
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            serde_json::to_writer(&mut f, self)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let header = peek(&text)?;
        if header.scalar != T::NAME {
            return Err(Error::Config(format!(
                "checkpoint holds {} weights, requested {}",
                header.scalar,
                T::NAME
            )));
        }
        Ok(serde_json::from_str(&text)?)
    }

    /// Rebuilds the model and copies the stored weights in.
    pub fn model(&self) -> Result<QueryMamba<T>> {
        let mut model = QueryMamba::new(self.config.clone(), self.taxonomy.clone())?;
        model.store.load_values(&self.params)?;
        Ok(model)
    }
}

fn peek(text: &str) -> Result<Header> {
    let header: Header = serde_json::from_str(text)?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "not a supported checkpoint: {} v{}",
            header.format, header.version
        )));
    }
    Ok(header)
}

/// Scalar type name stored in a checkpoint file (`"f32"` or `"f64"`).
pub fn checkpoint_scalar(path: &Path) -> Result<String> {
    Ok(peek(&fs::read_to_string(path)?)?.scalar)
}
