//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use imo::datagen::{two_feature, two_feature_task, Corpus, CorpusSpec, Example, Vocab};
use imo::encoder::EncoderConfig;
use imo::masking::{pre_activation, MaskVariant};
use imo::model::{Architecture, ImoModel, ModelConfig, Session};
use imo::params::ParamId;
use imo::tensor::{StepEstimator, Tensor};
use imo::trainer::{self, total_loss, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEAMS: [f64; 5] = [0.0, 0.4, -0.4, 1.0, -1.0];

/// Result of comparing tape gradients with central differences.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    /// `(param name, index, analytic, numeric)` of every mismatch.
    pub failures: Vec<(String, usize, f64, f64)>,
}

fn grad_model(n_labels: usize, seed: u64) -> ImoModel {
    let mut model = ImoModel::new(ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            max_len: 4,
            seed,
            final_layernorm: true,
        },
        n_labels,
        ..ModelConfig::default()
    })
    .unwrap();
    // scale weights up so every gradient is well above rounding noise
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<(ParamId, String)> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let v = model.store.value_mut(id).data_mut();
        for x in v.iter_mut() {
            *x = if name.ends_with(".r") {
                let mag = rng.random_range(0.0..1.2);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            } else if name.ends_with(".s") {
                rng.random_range(0.05..0.6)
            } else if name.contains("ln") && name.ends_with("gamma") {
                1.0 + rng.random_range(-0.2..0.2)
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
    }
    model.set_active(&[1, 2]).unwrap();
    model
}

fn batch(n_labels: usize) -> Vec<Example> {
    vec![
        Example {
            tokens: vec![1, 5, 3, 11],
            label: 0,
            domain: "g".into(),
        },
        Example {
            tokens: vec![7, 2, 9, 4],
            label: n_labels - 1,
            domain: "g".into(),
        },
        Example {
            tokens: vec![6, 6, 10],
            label: 1,
            domain: "g".into(),
        },
    ]
}

fn loss_and_grads(model: &ImoModel, examples: &[Example], exact: bool) -> (f64, Vec<(ParamId, Vec<f64>)>) {
    let config = TrainConfig {
        alpha: 0.3,
        beta: 0.2,
        ..TrainConfig::default()
    };
    let refs: Vec<&Example> = examples.iter().collect();
    let mut sess = Session::new(model, true);
    if exact {
        sess.tape.set_step_estimator(Some(StepEstimator::Exact));
    }
    let parts = total_loss(model, &mut sess, &refs, &[1, 2], &config).unwrap();
    let value = sess.tape.value(parts.total).item();
    sess.tape.backward(parts.total).unwrap();
    (value, sess.param_grads())
}

fn loss(model: &ImoModel, examples: &[Example]) -> f64 {
    loss_and_grads(model, examples, true).0
}

/// Parameters of mask layers whose pre-activation sits near a seam.
fn near_seam(model: &ImoModel, tol: f64) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for f in model.all_filters() {
        let t = pre_activation(f.r(&model.store), f.s(&model.store));
        for (i, &ti) in t.iter().enumerate() {
            if SEAMS.iter().any(|s| (ti - s).abs() < tol) {
                out.push((f.r, i));
                out.push((f.s, if model.store.value(f.s).len() == 1 { 0 } else { i }));
            }
        }
    }
    out
}

/// Compares every gradient entry of the full training loss with a central
/// difference, with the unit step's true (zero) derivative on the tape.
pub fn grad_check(n_labels: usize, seed: u64, rtol: f64) -> GradCheck {
    let mut model = grad_model(n_labels, seed);
    let examples = batch(n_labels);
    let (_, grads) = loss_and_grads(&model, &examples, true);
    let skip = near_seam(&model, 1e-3);
    let h = 1e-5;
    let mut report = GradCheck::default();
    for (id, g) in grads {
        let name = model.store.get(id).name.clone();
        for (i, &analytic) in g.iter().enumerate() {
            if skip.contains(&(id, i)) {
                report.skipped += 1;
                continue;
            }
            let orig = model.store.value(id).data()[i];
            model.store.value_mut(id).data_mut()[i] = orig + h;
            let up = loss(&model, &examples);
            model.store.value_mut(id).data_mut()[i] = orig - h;
            let down = loss(&model, &examples);
            model.store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.checked += 1;
            // rtol against the larger magnitude, with a floor for entries
            // that are zero up to rounding
            if (analytic - numeric).abs() > rtol * analytic.abs().max(numeric.abs()) + 1e-9 {
                report.failures.push((name.clone(), i, analytic, numeric));
            }
        }
    }
    report
}

/// Model for the two-feature task: identity backbone with the fixed 2-d
/// embedding table, so only the mask and head learn.
pub fn two_feature_model(seed: u64) -> ImoModel {
    let mut model = ImoModel::new(ModelConfig {
        encoder: EncoderConfig {
            vocab_size: two_feature::VOCAB,
            d_model: 2,
            n_layers: 1,
            n_heads: 1,
            d_ff: 2,
            max_len: 2,
            seed,
            final_layernorm: false,
        },
        architecture: Architecture::Full,
        ..ModelConfig::default()
    })
    .unwrap();
    model.encoder.make_passthrough(&mut model.store);
    let table: Vec<f64> = two_feature::EMBEDDING.iter().flatten().copied().collect();
    *model.store.value_mut(model.encoder.token_embedding) = Tensor::matrix(two_feature::VOCAB, 2, table).unwrap();
    model
}

pub fn two_feature_corpus(seed: u64) -> Corpus {
    let train = two_feature_task(seed, 2000);
    let validation = two_feature_task(seed + 1_000_000, 400);
    Corpus {
        train,
        validation: validation.clone(),
        test: validation,
        n_labels: 2,
        vocab: Vocab::identity(two_feature::VOCAB),
        source: "two_feature".into(),
        targets: Vec::new(),
    }
}

pub fn two_feature_config(seed: u64, alpha: f64) -> TrainConfig {
    TrainConfig {
        alpha,
        batch_size: 32,
        train_backbone: false,
        seed,
        ..TrainConfig::default()
    }
}

/// Trains on the two-feature task and returns the top-layer gate `q`
/// (causal channel first) and the validation accuracy.
pub fn two_feature_run(seed: u64, alpha: f64) -> (Vec<f64>, f64) {
    let corpus = two_feature_corpus(seed);
    let out = trainer::train(two_feature_model(seed), &corpus, &two_feature_config(seed, alpha), "two-feature").unwrap();
    let q = out.model.mask_group(1)[0].binary_mask(&out.model.store);
    (q, out.records[out.selected].validation)
}

/// Small model for the synthetic benchmark runs.
pub fn bench_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 200,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_len: 32,
            seed: 0,
            final_layernorm: true,
        },
        ..ModelConfig::default()
    }
}

pub fn bench_train() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs_per_stage: 3,
        ..TrainConfig::default()
    }
}

pub fn bench_corpus(seed: u64) -> CorpusSpec {
    CorpusSpec {
        n_train: 2000,
        n_validation: 500,
        n_test: 1000,
        seed,
        ..CorpusSpec::default()
    }
}

pub fn variant_name(v: MaskVariant) -> &'static str {
    v.name()
}
