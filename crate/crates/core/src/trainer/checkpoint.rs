use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState, TrainerConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "dfscil-checkpoint/v1";

/// Everything needed to resume or re-score a run, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model_config: ModelConfig,
    pub trainer_config: TrainerConfig,
    pub state: ModelState,
}

impl Checkpoint {
    pub fn new(model_config: ModelConfig, trainer_config: TrainerConfig, state: ModelState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            model_config,
            trainer_config,
            state,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Numerical(format!("cannot serialize checkpoint: {e}")))
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line() as u64,
            message: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("unsupported checkpoint format {:?}", ck.format),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?, path)
    }
}
