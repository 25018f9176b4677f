use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autodiff::ParameterSet;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Parameters plus the configuration that shaped them and the fingerprint
/// of the corpus they were trained on.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub corpus_fingerprint: String,
    pub params: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: &Model, corpus_fingerprint: &str) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: model.config.clone(),
            corpus_fingerprint: corpus_fingerprint.to_string(),
            params: model.params.to_json_value(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint format version {}", c.format_version)));
        }
        Ok(c)
    }

    pub fn model(&self) -> Result<Model> {
        let params = ParameterSet::from_json_value(self.params.clone())?;
        Model::from_parts(self.config.clone(), params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Checkpoint::from_json(&text)
    }
}
