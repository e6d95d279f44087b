//! Experiment drivers and reports: mask similarity, the reverse-mask study,
//! the ablation grid and the training-size sweep.
//!
//! Every report is a CSV file plus a JSON sidecar holding the producing
//! config, seeds and content hashes.

pub mod ablation;
pub mod reverse;
pub mod similarity;
pub mod sweep;

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::datagen::{sha256_hex, Corpus};
use crate::error::{Error, Result};
use crate::heads::AttentionDump;
use crate::model::{ImoModel, ModelConfig};
use crate::trainer::{self, evaluate, Metric, TrainConfig, TrainOutput};

pub use ablation::{ablation_suite, Variant};
pub use reverse::{reverse_mask_study, ReverseReport};
pub use similarity::{cosine, jaccard, mask_similarity, permutation_baseline, SimilarityTable};
pub use sweep::size_sweep;

/// Builds a model for `seed` and trains it. The seed replaces both the
/// encoder init seed and the training seed; the run's mask variant wins over
/// the model config's.
pub fn run_seed(model: &ModelConfig, train: &TrainConfig, corpus: &Corpus, seed: u64, run_id: &str) -> Result<TrainOutput> {
    let mut mc = model.clone();
    mc.encoder.seed = seed;
    mc.mask_variant = train.mask_variant;
    mc.n_labels = corpus.n_labels;
    let tc = TrainConfig { seed, ..train.clone() };
    trainer::train(ImoModel::new(mc)?, corpus, &tc, run_id)
}

/// Test score on every domain of `corpus`, source first.
pub fn domain_scores(model: &ImoModel, corpus: &Corpus, metric: Metric) -> Result<Vec<(String, f64)>> {
    corpus
        .domain_names()
        .into_iter()
        .map(|d| {
            let ex = corpus.test_domain(&d);
            evaluate(model, &ex, metric).map(|s| (d, s))
        })
        .collect()
}

/// One trained model's scores within a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub variant: String,
    pub seed: u64,
    pub size: Option<usize>,
    pub selected_stage: usize,
    pub validation: f64,
    /// `(domain, test score)`, source first.
    pub scores: Vec<(String, f64)>,
}

impl RunRow {
    pub fn score(&self, domain: &str) -> Option<f64> {
        self.scores.iter().find(|(d, _)| d == domain).map(|(_, s)| *s)
    }

    pub fn source(&self) -> f64 {
        self.scores[0].1
    }

    /// Mean score over the non-source domains.
    pub fn target_mean(&self) -> f64 {
        let t = &self.scores[1..];
        if t.is_empty() {
            return f64::NAN;
        }
        t.iter().map(|(_, s)| s).sum::<f64>() / t.len() as f64
    }

    pub fn from_output(variant: &str, seed: u64, size: Option<usize>, out: &TrainOutput, corpus: &Corpus, metric: Metric) -> Result<Self> {
        Ok(Self {
            variant: variant.to_string(),
            seed,
            size,
            selected_stage: out.selected,
            validation: out.records[out.selected].validation,
            scores: domain_scores(&out.model, corpus, metric)?,
        })
    }
}

/// Mean of `f` over rows whose variant (and size, when given) match.
pub fn mean_over(rows: &[RunRow], variant: &str, size: Option<usize>, f: impl Fn(&RunRow) -> f64) -> f64 {
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == variant && (size.is_none() || r.size == size))
        .map(f)
        .collect();
    picked.iter().sum::<f64>() / picked.len() as f64
}

pub fn write_rows_csv(rows: &[RunRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let with_size = rows.iter().any(|r| r.size.is_some());
    let domains: Vec<String> = rows
        .first()
        .map(|r| r.scores.iter().map(|(d, _)| d.clone()).collect())
        .unwrap_or_default();
    let mut header = vec!["variant".to_string(), "seed".into()];
    if with_size {
        header.push("size".into());
    }
    header.extend(["selected_stage".into(), "validation".into()]);
    header.extend(domains.iter().cloned());
    header.push("target_mean".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.variant.clone(), r.seed.to_string()];
        if with_size {
            rec.push(r.size.map(|s| s.to_string()).unwrap_or_default());
        }
        rec.push(r.selected_stage.to_string());
        rec.push(r.validation.to_string());
        rec.extend(r.scores.iter().map(|(_, s)| s.to_string()));
        rec.push(r.target_mean().to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// JSON file written next to every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// `(file name, sha256 hex)` of the report files.
    pub checksums: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Sidecar {
    pub fn new(kind: &str, config: &impl Serialize, seeds: &[u64]) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            seeds: seeds.to_vec(),
            checksums: Vec::new(),
            notes: Vec::new(),
        })
    }

    /// Hashes `files` (inside `dir`) and writes `<stem>.json`.
    pub fn write(mut self, dir: &Path, stem: &str, files: &[&str]) -> Result<()> {
        for f in files {
            self.checksums.push((f.to_string(), sha256_hex(&fs::read(dir.join(f))?)));
        }
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(())
    }
}

/// Writes one attention dump per example as JSON lines.
pub fn write_attention_dumps(model: &ImoModel, corpus_examples: &[crate::datagen::Example], path: &Path) -> Result<()> {
    let mut s = String::new();
    for e in corpus_examples {
        let d: AttentionDump = model.attention_dump(&e.tokens, e.label)?;
        s.push_str(&serde_json::to_string(&d)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Runs `jobs` on up to `threads` workers and returns results in job order.
pub fn run_parallel<T: Send, J: Sync>(jobs: &[J], threads: usize, f: impl Fn(&J) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = threads.max(1).min(jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(Error::Runtime("worker did not finish".into()))))
        .collect()
}
