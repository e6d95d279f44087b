//! The variant grid: the full method and its ablations under shared seeds.

use serde::{Deserialize, Serialize};

use crate::datagen::Corpus;
use crate::error::Result;
use crate::masking::MaskVariant;
use crate::model::{Architecture, ModelConfig};
use crate::trainer::{Schedule, TrainConfig};

use super::{run_parallel, run_seed, RunRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full method: masks, attention head, top-down schedule.
    Imo,
    /// Attention head with a raw query; no masks.
    WoM,
    /// Masks with mean pooling.
    WoA,
    /// Plain encoder with mean pooling.
    WoAm,
    Ste,
    Str,
    Scalar,
    /// Bottom-up schedule.
    B2t,
    /// All masks in one stage.
    WoSq,
    /// Top mask only.
    Last,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Imo,
        Variant::WoM,
        Variant::WoA,
        Variant::WoAm,
        Variant::Ste,
        Variant::Str,
        Variant::Scalar,
        Variant::B2t,
        Variant::WoSq,
        Variant::Last,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Imo => "imo",
            Variant::WoM => "w/o m",
            Variant::WoA => "w/o a",
            Variant::WoAm => "w/o am",
            Variant::Ste => "ste",
            Variant::Str => "str",
            Variant::Scalar => "scalar",
            Variant::B2t => "b2t",
            Variant::WoSq => "w/o sq",
            Variant::Last => "last",
        }
    }

    pub fn configure(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        let mut t = train.clone();
        match self {
            Variant::Imo => {}
            Variant::WoM => m.architecture = Architecture::NoMask,
            Variant::WoA => m.architecture = Architecture::NoAttention,
            Variant::WoAm => m.architecture = Architecture::Plain,
            Variant::Ste => t.mask_variant = MaskVariant::Ste,
            Variant::Str => t.mask_variant = MaskVariant::Str,
            Variant::Scalar => t.mask_variant = MaskVariant::Scalar,
            Variant::B2t => t.schedule = Schedule::BottomUp,
            Variant::WoSq => t.schedule = Schedule::Simultaneous,
            Variant::Last => t.schedule = Schedule::LastOnly,
        }
        (m, t)
    }
}

/// Trains every `(variant, seed)` pair; rows come back variant-major.
pub fn ablation_suite(
    corpus: &Corpus,
    model: &ModelConfig,
    train: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<RunRow>> {
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    run_parallel(&jobs, threads, |&(v, seed)| {
        let (mc, tc) = v.configure(model, train);
        let run_id = format!("{}-seed{seed}", v.name().replace(['/', ' '], ""));
        let out = run_seed(&mc, &tc, corpus, seed, &run_id)?;
        RunRow::from_output(v.name(), seed, None, &out, corpus, tc.metric_for(corpus.n_labels))
    })
}
