//! JSON checkpoints. Floats are written with round-trip precision, so a
//! saved and reloaded model is bitwise identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ImoModel;

pub const FORMAT: &str = "imo-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub run_id: String,
    /// Stage the weights were taken from.
    pub stage: usize,
    pub validation: f64,
    pub model: ImoModel,
}

impl Checkpoint {
    pub fn new(run_id: &str, stage: usize, validation: f64, model: ImoModel) -> Self {
        Self {
            format: FORMAT.to_string(),
            run_id: run_id.to_string(),
            stage,
            validation,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format != FORMAT {
            return Err(Error::input(format!(
                "{}: unsupported checkpoint format {:?}",
                path.display(),
                ck.format
            )));
        }
        Ok(ck)
    }
}
