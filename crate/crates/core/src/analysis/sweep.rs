//! Training-size sweep of the full method against the plain backbone.

use crate::datagen::CorpusSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

use super::ablation::Variant;
use super::{run_parallel, run_seed, RunRow};

/// For each source training size and seed, trains the full method and the
/// plain-backbone ablation on the first `size` training examples.
pub fn size_sweep(
    spec: &CorpusSpec,
    sizes: &[usize],
    model: &ModelConfig,
    train: &TrainConfig,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<RunRow>> {
    if sizes.is_empty() {
        return Err(Error::config("sizes", "need at least one size"));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("sizes", "sizes must be strictly ascending"));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > spec.n_train) {
        return Err(Error::config(
            "sizes",
            format!("size {s} outside 1..={} (corpus n_train)", spec.n_train),
        ));
    }
    let full = spec.build()?;
    let mut jobs = Vec::new();
    for &size in sizes {
        for &seed in seeds {
            for v in [Variant::Imo, Variant::WoAm] {
                jobs.push((size, seed, v));
            }
        }
    }
    run_parallel(&jobs, threads, |&(size, seed, v)| {
        let corpus = full.with_train_size(size)?;
        let (mc, tc) = v.configure(model, train);
        let run_id = format!("{}-n{size}-seed{seed}", v.name().replace(['/', ' '], ""));
        let out = run_seed(&mc, &tc, &corpus, seed, &run_id)?;
        RunRow::from_output(v.name(), seed, Some(size), &out, &corpus, tc.metric_for(corpus.n_labels))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn spec() -> CorpusSpec {
        CorpusSpec {
            vocab_size: 60,
            causal_per_label: 2,
            spurious_per_label: 2,
            seq_len_min: 6,
            seq_len_max: 8,
            n_train: 40,
            n_validation: 16,
            n_test: 16,
            ..CorpusSpec::default()
        }
    }

    fn model() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: 60,
                d_model: 4,
                n_layers: 1,
                n_heads: 1,
                d_ff: 4,
                max_len: 8,
                seed: 0,
                final_layernorm: true,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn single_size_gives_one_row_pair() {
        let t = TrainConfig {
            epochs_per_stage: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let rows = size_sweep(&spec(), &[20], &model(), &t, &[0], 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].variant, "imo");
        assert_eq!(rows[1].variant, "w/o am");
        assert!(rows.iter().all(|r| r.size == Some(20)));
    }

    #[test]
    fn bad_sizes_are_config_errors() {
        let t = TrainConfig::default();
        for sizes in [vec![41], vec![20, 10], vec![]] {
            assert!(matches!(
                size_sweep(&spec(), &sizes, &model(), &t, &[0], 1),
                Err(Error::Config { .. })
            ));
        }
    }
}
