//! Loss assembly, optimization and the layer-wise mask schedules.
//!
//! A run is a sequence of stages. Each stage switches on a set of mask layers,
//! trains some of them together with the head, and is scored on the source
//! validation split. The best stage wins; ties go to the later (more masked)
//! stage.

pub mod adam;
pub mod metrics;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, Example};
use crate::error::{Error, Result};
use crate::masking::MaskVariant;
use crate::model::{Architecture, ImoModel, Session};
use crate::params::ParamId;
use crate::tensor::Var;

pub use adam::{adam_update, lr_at, Adam};
pub use metrics::{accuracy, confusion, macro_f1, Metric};

/// Order in which mask layers are trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Top mask first, then one layer further down per stage.
    #[default]
    TopDown,
    /// Bottom mask first, then one layer further up per stage.
    BottomUp,
    /// Every mask in one stage.
    Simultaneous,
    /// Only the top mask.
    LastOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub betas: (f64, f64),
    pub warmup_fraction: f64,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub mask_variant: MaskVariant,
    pub seed: u64,
    /// Number of mask layers to train, counted from where the schedule starts.
    /// `None` means every layer.
    pub max_masked_layers: Option<usize>,
    /// Train encoder weights during the first stage.
    pub train_backbone: bool,
    /// Keep encoder weights fixed after the first stage.
    pub freeze_backbone: bool,
    /// Selection metric; defaults by label count.
    pub metric: Option<Metric>,
    /// Fill the `wallclock_s` column (makes the log non-reproducible).
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            lr: 5e-4,
            betas: (0.9, 0.999),
            warmup_fraction: 0.1,
            epochs_per_stage: 5,
            batch_size: 32,
            schedule: Schedule::TopDown,
            mask_variant: MaskVariant::LongTailed,
            seed: 0,
            max_masked_layers: None,
            train_backbone: true,
            freeze_backbone: true,
            metric: None,
            record_wallclock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_layers: usize, architecture: Architecture) -> Result<()> {
        let bad = |f: &str, m: String| Err(Error::config(format!("train.{f}"), m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", format!("must be a finite value >= 0, got {}", self.alpha));
        }
        if self.alpha == 0.0 && architecture.masks() {
            log::warn!("alpha = 0: masks train without sparsity pressure");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", format!("must be a finite value >= 0, got {}", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas", "both must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", format!("must lie in [0, 1), got {}", self.warmup_fraction));
        }
        if self.epochs_per_stage == 0 {
            return bad("epochs_per_stage", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if let Some(k) = self.max_masked_layers {
            if k == 0 || k > n_layers {
                return bad("max_masked_layers", format!("{k} outside 1..={n_layers}"));
            }
        }
        Ok(())
    }

    pub fn metric_for(&self, n_labels: usize) -> Metric {
        self.metric.unwrap_or_else(|| Metric::for_labels(n_labels))
    }
}

/// Mask layers (1-based) trained in a stage and the layers applied during it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub trained: Vec<usize>,
    pub active: Vec<usize>,
}

pub fn stage_plan(schedule: Schedule, n_layers: usize, max_masked: Option<usize>, masks: bool) -> Vec<StagePlan> {
    if !masks {
        return vec![StagePlan {
            trained: Vec::new(),
            active: Vec::new(),
        }];
    }
    let k = max_masked.unwrap_or(n_layers).min(n_layers);
    match schedule {
        Schedule::TopDown => (0..k)
            .map(|i| StagePlan {
                trained: vec![n_layers - i],
                active: (n_layers - i..=n_layers).collect(),
            })
            .collect(),
        Schedule::BottomUp => (0..k)
            .map(|i| StagePlan {
                trained: vec![i + 1],
                active: (1..=i + 1).collect(),
            })
            .collect(),
        Schedule::Simultaneous => {
            let layers: Vec<usize> = (n_layers - k + 1..=n_layers).collect();
            vec![StagePlan {
                trained: layers.clone(),
                active: layers,
            }]
        }
        Schedule::LastOnly => vec![StagePlan {
            trained: vec![n_layers],
            active: vec![n_layers],
        }],
    }
}

/// Terms of the training objective for one batch.
pub struct LossParts {
    pub ce: Var,
    pub sparsity: Option<Var>,
    pub distance: Option<Var>,
    pub total: Var,
}

/// Mean cross-entropy plus `alpha` times the sparsity of `sparsity_layers`,
/// plus `beta` times the label-mask distance when the top masks train.
pub fn total_loss(
    model: &ImoModel,
    sess: &mut Session,
    batch: &[&Example],
    sparsity_layers: &[usize],
    config: &TrainConfig,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let mut sum: Option<Var> = None;
    for ex in batch {
        let f = model.forward(sess, &ex.tokens)?;
        let ls = sess.tape.log_softmax(f.logits)?;
        let lp = sess.tape.pick(ls, ex.label)?;
        sum = Some(match sum {
            Some(s) => sess.tape.add(s, lp)?,
            None => lp,
        });
    }
    let ce = sess.tape.scale(sum.expect("non-empty batch"), -1.0 / batch.len() as f64)?;
    let mut total = ce;
    let mut sparsity = None;
    if model.has_masks() && !sparsity_layers.is_empty() {
        if let Some(sp) = model.sparsity_var(sess, sparsity_layers)? {
            let w = sess.tape.scale(sp, config.alpha)?;
            total = sess.tape.add(total, w)?;
            sparsity = Some(sp);
        }
    }
    let mut distance = None;
    if config.beta > 0.0 && sparsity_layers.contains(&model.n_layers()) {
        if let Some(dl) = model.distance_var(sess)? {
            let w = sess.tape.scale(dl, config.beta)?;
            total = sess.tape.add(total, w)?;
            distance = Some(dl);
        }
    }
    Ok(LossParts {
        ce,
        sparsity,
        distance,
        total,
    })
}

pub fn predictions(model: &ImoModel, examples: &[Example]) -> Result<Vec<usize>> {
    let batch: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    model.predict(&batch)
}

pub fn evaluate(model: &ImoModel, examples: &[Example], metric: Metric) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    if let Some(e) = examples.iter().find(|e| e.label >= model.n_labels()) {
        return Err(Error::input(format!(
            "label {} outside the head's {} labels",
            e.label,
            model.n_labels()
        )));
    }
    let pred = predictions(model, examples)?;
    let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
    metric.score(&pred, &gold, model.n_labels())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub stage: usize,
    /// 1-based epoch, or `selected` for the chosen model.
    pub epoch: String,
    pub split: String,
    pub metric_name: String,
    pub value: f64,
    pub sparsity_fraction: f64,
    pub wallclock_s: Option<f64>,
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &std::path::Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub trained_layers: Vec<usize>,
    pub active_layers: Vec<usize>,
    /// Source-validation score after the stage.
    pub validation: f64,
    pub sparsity_fraction: f64,
    #[serde(skip)]
    pub checkpoint: Option<Box<ImoModel>>,
}

pub struct TrainOutput {
    pub run_id: String,
    pub records: Vec<StageRecord>,
    pub selected: usize,
    pub model: ImoModel,
    pub rows: Vec<MetricRow>,
}

/// Argmax of `scores`; ties resolve to the later index.
pub fn select_stage(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s >= scores[best] {
            best = i;
        }
    }
    best
}

fn stage_params(model: &ImoModel, plan: &StagePlan, stage: usize, config: &TrainConfig) -> Vec<ParamId> {
    let mut ids = model.head_params();
    let top = model.n_layers();
    if !plan.active.contains(&top) || !model.has_masks() {
        ids.extend(model.query_params());
    }
    for &l in &plan.trained {
        for f in model.mask_group(l) {
            ids.push(f.r);
            ids.push(f.s);
        }
    }
    if (stage == 0 && config.train_backbone) || (stage > 0 && !config.freeze_backbone) {
        ids.extend(model.encoder.params());
    }
    ids.sort_by_key(|id| id.0);
    ids.dedup();
    ids
}

fn mean_sparsity(model: &ImoModel, layers: &[usize]) -> f64 {
    if layers.is_empty() {
        return 0.0;
    }
    layers.iter().map(|&l| model.sparsity_fraction(l)).sum::<f64>() / layers.len() as f64
}

pub const MAX_ABORTS: usize = 3;

/// Shared state of one run: shuffling stream, log rows and clock.
pub struct RunState {
    pub run_id: String,
    pub metric: Metric,
    pub rows: Vec<MetricRow>,
    rng: ChaCha8Rng,
    started: Instant,
}

impl RunState {
    pub fn new(run_id: &str, config: &TrainConfig, metric: Metric) -> Self {
        Self {
            run_id: run_id.to_string(),
            metric,
            rows: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_7a1e),
            started: Instant::now(),
        }
    }

    fn clock(&self, config: &TrainConfig) -> Option<f64> {
        config.record_wallclock.then(|| self.started.elapsed().as_secs_f64())
    }

    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, config: &TrainConfig, stage: usize, epoch: String, split: &str, name: &str, value: f64, sparsity: f64) {
        let wallclock_s = self.clock(config);
        self.rows.push(MetricRow {
            run_id: self.run_id.clone(),
            stage,
            epoch,
            split: split.into(),
            metric_name: name.into(),
            value,
            sparsity_fraction: sparsity,
            wallclock_s,
        });
    }
}

/// Trains `trainable` (everything else frozen) for `epochs_per_stage` epochs
/// with a fresh optimizer, logging train loss and validation score per epoch.
/// Returns the final validation score.
pub fn fit_stage(
    model: &mut ImoModel,
    corpus: &Corpus,
    config: &TrainConfig,
    trainable: &[ParamId],
    sparsity_layers: &[usize],
    stage: usize,
    run: &mut RunState,
) -> Result<f64> {
    model.store.freeze_all(true);
    for &id in trainable {
        model.store.set_frozen(id, false);
    }
    let n = corpus.train.len();
    let total_steps = n.div_ceil(config.batch_size) * config.epochs_per_stage;
    let mut order: Vec<usize> = (0..n).collect();
    let mut adam = Adam::new(config.betas);
    let mut step = 0usize;
    let mut aborts = 0usize;
    let mut validation = f64::NAN;
    let active = model.active_layers();
    for epoch in 1..=config.epochs_per_stage {
        order.shuffle(&mut run.rng);
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            let lr = lr_at(config.lr, step, total_steps, config.warmup_fraction);
            step += 1;
            let outcome = (|| {
                let mut sess = Session::new(model, true);
                let parts = total_loss(model, &mut sess, &batch, sparsity_layers, config)?;
                let value = sess.tape.value(parts.total).item();
                sess.tape.backward(parts.total)?;
                Ok::<_, Error>((value, sess.param_grads()))
            })();
            let outcome = outcome.and_then(|(value, grads)| {
                adam.step(&mut model.store, &grads, lr)?;
                Ok(value)
            });
            match outcome {
                Ok(value) => {
                    aborts = 0;
                    loss_sum += value;
                    loss_batches += 1;
                }
                Err(Error::NonFinite(op)) => {
                    aborts += 1;
                    log::warn!("{}: stage {stage} step {step}: non-finite {op}, step skipped", run.run_id);
                    if aborts >= MAX_ABORTS {
                        return Err(Error::Runtime(format!(
                            "{}: {MAX_ABORTS} consecutive non-finite steps in stage {stage}",
                            run.run_id
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let sparsity = mean_sparsity(model, &active);
        let loss = if loss_batches > 0 {
            loss_sum / loss_batches as f64
        } else {
            f64::NAN
        };
        run.push(config, stage, epoch.to_string(), "train", "loss", loss, sparsity);
        validation = evaluate(model, &corpus.validation, run.metric)?;
        run.push(
            config,
            stage,
            epoch.to_string(),
            "validation",
            run.metric.name(),
            validation,
            sparsity,
        );
        log::debug!(
            "{}: stage {stage} epoch {epoch} loss {loss:.5} validation {validation:.4}",
            run.run_id
        );
    }
    Ok(validation)
}

/// Trains `model` on `corpus.train` under `config.schedule` and returns the
/// stage with the best source-validation score.
pub fn train(mut model: ImoModel, corpus: &Corpus, config: &TrainConfig, run_id: &str) -> Result<TrainOutput> {
    config.validate(model.n_layers(), model.config.architecture)?;
    if corpus.train.is_empty() || corpus.validation.is_empty() {
        return Err(Error::input("training needs non-empty train and validation splits"));
    }
    if model.config.mask_variant != config.mask_variant && model.has_masks() {
        log::warn!(
            "model was built with {} masks but the run asks for {}",
            model.config.mask_variant.name(),
            config.mask_variant.name()
        );
    }
    let metric = config.metric_for(model.n_labels());
    let plans = stage_plan(config.schedule, model.n_layers(), config.max_masked_layers, model.has_masks());
    let mut run = RunState::new(run_id, config, metric);
    let mut records = Vec::new();
    for (stage, plan) in plans.iter().enumerate() {
        model.set_active(&plan.active)?;
        let trainable = stage_params(&model, plan, stage, config);
        log::info!(
            "{run_id}: stage {stage} trains layers {:?} with layers {:?} active ({} tensors)",
            plan.trained,
            plan.active,
            trainable.len()
        );
        let validation = fit_stage(&mut model, corpus, config, &trainable, &plan.trained, stage, &mut run)?;
        log::info!("{run_id}: stage {stage} validation {} = {validation:.4}", metric.name());
        records.push(StageRecord {
            stage,
            trained_layers: plan.trained.clone(),
            active_layers: plan.active.clone(),
            validation,
            sparsity_fraction: mean_sparsity(&model, &plan.active),
            checkpoint: Some(Box::new(model.clone())),
        });
    }
    let scores: Vec<f64> = records.iter().map(|r| r.validation).collect();
    let selected = select_stage(&scores);
    let chosen = records[selected].checkpoint.as_deref().expect("stage checkpoint").clone();
    let sparsity = records[selected].sparsity_fraction;
    run.push(
        config,
        selected,
        "selected".into(),
        "validation",
        metric.name(),
        scores[selected],
        sparsity,
    );
    Ok(TrainOutput {
        run_id: run_id.to_string(),
        records,
        selected,
        model: chosen,
        rows: run.rows,
    })
}

/// Retrains only the classification head of a copy of `model`, keeping its
/// active mask set.
pub fn retrain_head(model: &ImoModel, corpus: &Corpus, config: &TrainConfig, run_id: &str) -> Result<(ImoModel, Vec<MetricRow>)> {
    config.validate(model.n_layers(), model.config.architecture)?;
    let mut copy = model.clone();
    let metric = config.metric_for(copy.n_labels());
    let mut run = RunState::new(run_id, config, metric);
    let head = copy.head_params();
    fit_stage(&mut copy, corpus, config, &head, &[], 0, &mut run)?;
    Ok((copy, run.rows))
}
