//! Reverse-mask study: swap every gate `q` for `|1 - q|`, retrain only the
//! head on the source domain and compare against the original model.

use serde::{Deserialize, Serialize};

use crate::datagen::Corpus;
use crate::error::{Error, Result};
use crate::model::ImoModel;
use crate::trainer::{retrain_head, TrainConfig};

use super::domain_scores;

pub const NOTE: &str = "the complemented gates are used everywhere m is derived, including the attention query";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReverseReport {
    /// Source first.
    pub domains: Vec<String>,
    pub original: Vec<f64>,
    pub complemented: Vec<f64>,
    pub note: String,
}

impl ReverseReport {
    /// `complemented - original` per domain.
    pub fn deltas(&self) -> Vec<f64> {
        self.complemented.iter().zip(&self.original).map(|(c, o)| c - o).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["domain", "original", "complemented", "delta"])?;
        for (i, d) in self.domains.iter().enumerate() {
            w.write_record([
                d.clone(),
                self.original[i].to_string(),
                self.complemented[i].to_string(),
                (self.complemented[i] - self.original[i]).to_string(),
            ])?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Runtime(e.to_string()))?).map_err(|e| Error::Runtime(e.to_string()))
    }
}

/// Runs the study on a copy of `model`; the input is never modified.
pub fn reverse_mask_study(model: &ImoModel, corpus: &Corpus, config: &TrainConfig, run_id: &str) -> Result<(ReverseReport, ImoModel)> {
    if !model.has_masks() || model.active_layers().is_empty() {
        return Err(Error::Usage("reverse-mask study needs a model with active masks".into()));
    }
    let metric = config.metric_for(model.n_labels());
    let mut flipped = model.clone();
    flipped.complement_masks()?;
    let (retrained, _) = retrain_head(&flipped, corpus, config, run_id)?;
    let original = domain_scores(model, corpus, metric)?;
    let complemented = domain_scores(&retrained, corpus, metric)?;
    Ok((
        ReverseReport {
            domains: original.iter().map(|(d, _)| d.clone()).collect(),
            original: original.iter().map(|(_, s)| *s).collect(),
            complemented: complemented.iter().map(|(_, s)| *s).collect(),
            note: NOTE.to_string(),
        },
        retrained,
    ))
}
