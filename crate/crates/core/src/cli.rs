//! The `imo` command line.
//!
//! Every command takes a JSON config (`--config`), writes into `--out`, and
//! reports failure as one `error ...` line on stderr. Exit codes: 0 success,
//! 1 runtime failure, 2 bad config.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, ablation_suite, mask_similarity, permutation_baseline, reverse_mask_study, size_sweep, RunRow, Sidecar, Variant,
};
use crate::checkpoint::Checkpoint;
use crate::datagen::{self, sha256_hex, Corpus, CorpusSpec, VocabPolicy};
use crate::error::{Error, Result};
use crate::masking::MaskSnapshot;
use crate::model::{ImoModel, ModelConfig};
use crate::trainer::{self, evaluate, StageRecord, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "imo", version, about = "Sparse invariant-feature masks for transformer text classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run config; defaults apply to every missing field.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces the config seed(s); recorded in the outputs.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Worker threads for grid commands.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus: three split files and a manifest.
    GenData(Common),
    /// Train one model and write metrics, checkpoints and mask exports.
    Train(Common),
    /// Re-score a trained run; writes eval.csv inside the run directory.
    Eval {
        /// Run directory produced by `train`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full variant grid over the config seeds.
    Ablate(Common),
    /// Compare the top-layer masks of several trained runs.
    AnalyzeMasks {
        #[command(flatten)]
        common: Common,
        /// Run directories produced by `train` (two or more).
        #[arg(long = "run", required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
    /// Complement the masks of a trained run and retrain its head.
    ReverseMask {
        #[command(flatten)]
        common: Common,
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Train the full method and the plain backbone at several source sizes.
    SizeSweep(Common),
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A directory written by `gen-data`.
    Corpus { dir: PathBuf },
    /// External JSONL splits of `{"text", "label", "domain"}` lines. The
    /// source domain is the training file's; every other test domain is a
    /// target.
    Jsonl {
        train: PathBuf,
        validation: PathBuf,
        test: PathBuf,
        n_labels: usize,
    },
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_sizes() -> Vec<usize> {
    vec![250, 1000, 4000]
}

fn default_baselines() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Synthetic corpus, used when `data` is absent.
    #[serde(default)]
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default)]
    pub vocab: VocabPolicy,
    /// Seeds for grid commands.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Source training sizes for `size-sweep`.
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    /// Variants for `ablate`; all of them when absent.
    #[serde(default)]
    pub variants: Option<Vec<Variant>>,
    /// Random-permutation baselines per pair in `analyze-masks`.
    #[serde(default = "default_baselines")]
    pub baselines: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusSpec::default(),
            data: None,
            vocab: VocabPolicy::default(),
            seeds: default_seeds(),
            sizes: default_sizes(),
            variants: None,
            baselines: default_baselines(),
        }
    }
}

/// Parses a config, reporting the failing field path on error.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<root>".to_string() } else { path };
        Error::config(field, e.into_inner().to_string())
    })
}

fn load_config(path: Option<&Path>) -> Result<(RunConfig, PathBuf)> {
    match path {
        None => Ok((RunConfig::default(), PathBuf::from("."))),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((parse_config(&text)?, base))
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Resolves relative data paths against `base` (the config's directory).
    fn rebase(&mut self, base: &Path) {
        match &mut self.data {
            Some(DataSource::Corpus { dir }) => *dir = resolve(base, dir),
            Some(DataSource::Jsonl {
                train, validation, test, ..
            }) => {
                *train = resolve(base, train);
                *validation = resolve(base, validation);
                *test = resolve(base, test);
            }
            None => {}
        }
    }

    /// Applies a seed override to the model init and training stream.
    fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.model.encoder.seed = s;
            self.train.seed = s;
            self.seeds = vec![s];
        }
        self.model.mask_variant = self.train.mask_variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.encoder.n_layers, self.model.architecture)?;
        if self.data.is_none() {
            self.corpus.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        Ok(())
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.data {
            None => self.corpus.build(),
            Some(DataSource::Corpus { dir }) => datagen::read_corpus(dir),
            Some(DataSource::Jsonl {
                train,
                validation,
                test,
                n_labels,
            }) => {
                let (tr, vocab) = datagen::load_jsonl(train, *n_labels, None, &self.vocab)?;
                let (va, _) = datagen::load_jsonl(validation, *n_labels, Some(&vocab), &self.vocab)?;
                let (te, _) = datagen::load_jsonl(test, *n_labels, Some(&vocab), &self.vocab)?;
                let source = tr[0].domain.clone();
                let mut seen = BTreeSet::new();
                let targets = te
                    .iter()
                    .filter(|e| e.domain != source)
                    .filter(|e| seen.insert(e.domain.clone()))
                    .map(|e| e.domain.clone())
                    .collect();
                Ok(Corpus {
                    train: tr,
                    validation: va,
                    test: te,
                    n_labels: *n_labels,
                    vocab,
                    source,
                    targets,
                })
            }
        }
    }

    /// Checks the model against the corpus it will be trained on.
    fn fit_to(&mut self, corpus: &Corpus) -> Result<()> {
        if self.model.encoder.vocab_size < corpus.vocab.len() {
            return Err(Error::config(
                "model.encoder.vocab_size",
                format!(
                    "{} is smaller than the corpus vocabulary ({})",
                    self.model.encoder.vocab_size,
                    corpus.vocab.len()
                ),
            ));
        }
        let longest = corpus
            .train
            .iter()
            .chain(&corpus.validation)
            .chain(&corpus.test)
            .map(|e| e.tokens.len())
            .max()
            .unwrap_or(0);
        if longest > self.model.encoder.max_len {
            return Err(Error::config(
                "model.encoder.max_len",
                format!("{} is shorter than the longest sequence ({longest})", self.model.encoder.max_len),
            ));
        }
        self.model.n_labels = corpus.n_labels;
        self.model.validate()
    }

    /// Content-derived run id.
    pub fn run_id(&self) -> Result<String> {
        let h = sha256_hex(&serde_json::to_vec(self)?);
        Ok(format!("run-{}", &h[..12]))
    }
}

fn corpus_hash(c: &Corpus) -> Result<String> {
    let mut bytes = serde_json::to_vec(&c.train)?;
    bytes.extend(serde_json::to_vec(&c.validation)?);
    bytes.extend(serde_json::to_vec(&c.test)?);
    Ok(sha256_hex(&bytes))
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Usage(format!("{} exists and is not a directory", dir.display())));
        }
        if fs::read_dir(dir)?.next().is_some() && !force {
            return Err(Error::Usage(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Self-description written into every training run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub seed: u64,
    pub seed_override: Option<u64>,
    pub config_sha256: String,
    pub corpus_sha256: String,
    pub selected_stage: usize,
    pub stages: Vec<StageRecord>,
    /// `(domain, test score)` of the selected model.
    pub test: Vec<(String, f64)>,
}

pub const RUN_CONFIG: &str = "config.json";
pub const RUN_INFO: &str = "run.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const METRICS: &str = "metrics.csv";

fn cmd_gen_data(c: &Common) -> Result<()> {
    let (cfg, _) = load_config(c.config.as_deref())?;
    let mut spec = cfg.corpus;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    spec.validate()?;
    prepare_out(&c.out, c.force)?;
    let m = datagen::write_corpus(&spec, &c.out)?;
    for (name, sum) in &m.checksums {
        println!("{name} {sum}");
    }
    Ok(())
}

fn cmd_train(c: &Common, run_id: &mut Option<String>) -> Result<()> {
    let (cfg, base) = load_config(c.config.as_deref())?;
    let mut cfg = cfg.with_seed(c.seed);
    cfg.rebase(&base);
    cfg.validate()?;
    let corpus = cfg.load_corpus()?;
    cfg.fit_to(&corpus)?;
    let id = cfg.run_id()?;
    *run_id = Some(id.clone());
    prepare_out(&c.out, c.force)?;
    write_json(&c.out.join(RUN_CONFIG), &cfg)?;

    let model = ImoModel::new(cfg.model.clone())?;
    let out = trainer::train(model, &corpus, &cfg.train, &id)?;
    let metric = cfg.train.metric_for(corpus.n_labels);
    let stages = c.out.join("stages");
    fs::create_dir_all(&stages)?;
    for r in &out.records {
        if let Some(m) = &r.checkpoint {
            Checkpoint::new(&id, r.stage, r.validation, (**m).clone()).save(&stages.join(format!("stage_{}.json", r.stage)))?;
        }
    }
    let selected = &out.records[out.selected];
    Checkpoint::new(&id, out.selected, selected.validation, out.model.clone()).save(&c.out.join(CHECKPOINT))?;
    let test = analysis::domain_scores(&out.model, &corpus, metric)?;
    let mut rows = out.rows.clone();
    let selected_row = rows.pop().expect("selected row");
    for (d, s) in &test {
        rows.push(trainer::MetricRow {
            split: format!("test:{d}"),
            value: *s,
            ..selected_row.clone()
        });
    }
    rows.push(selected_row);
    trainer::write_metrics_csv(&rows, &c.out.join(METRICS))?;
    write_json(&c.out.join("masks.json"), &out.model.mask_snapshots())?;
    let mut dumps = Vec::new();
    for d in corpus.domain_names() {
        dumps.extend(corpus.test_domain(&d).into_iter().take(8));
    }
    analysis::write_attention_dumps(&out.model, &dumps, &c.out.join("attention.jsonl"))?;
    let info = RunInfo {
        run_id: id.clone(),
        seed: cfg.train.seed,
        seed_override: c.seed,
        config_sha256: sha256_hex(&fs::read(c.out.join(RUN_CONFIG))?),
        corpus_sha256: corpus_hash(&corpus)?,
        selected_stage: out.selected,
        stages: out.records.clone(),
        test: test.clone(),
    };
    write_json(&c.out.join(RUN_INFO), &info)?;
    println!(
        "{id} selected stage {} validation {} {:.6}",
        out.selected,
        metric.name(),
        selected.validation
    );
    for (d, s) in test {
        println!("{id} test {d} {} {s:.6}", metric.name());
    }
    Ok(())
}

/// Loads a run directory: its config (with data paths as recorded), corpus
/// and selected checkpoint.
pub fn load_run(dir: &Path) -> Result<(RunConfig, Corpus, Checkpoint)> {
    let cfg = parse_config(&fs::read_to_string(dir.join(RUN_CONFIG))?)?;
    let corpus = cfg.load_corpus()?;
    let ck = Checkpoint::load(&dir.join(CHECKPOINT))?;
    Ok((cfg, corpus, ck))
}

fn cmd_eval(dir: &Path, run_id: &mut Option<String>) -> Result<()> {
    let (cfg, corpus, ck) = load_run(dir)?;
    *run_id = Some(ck.run_id.clone());
    let metric = cfg.train.metric_for(corpus.n_labels);
    let mut w = csv::Writer::from_path(dir.join("eval.csv"))?;
    w.write_record(["run_id", "split", "metric_name", "value"])?;
    let mut emit = |split: &str, v: f64| -> Result<()> {
        println!("{} {split} {} {v}", ck.run_id, metric.name());
        w.write_record([ck.run_id.as_str(), split, metric.name(), &v.to_string()])?;
        Ok(())
    };
    emit("validation", evaluate(&ck.model, &corpus.validation, metric)?)?;
    for (d, s) in analysis::domain_scores(&ck.model, &corpus, metric)? {
        emit(&format!("test:{d}"), s)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_ablate(c: &Common) -> Result<()> {
    let (cfg, base) = load_config(c.config.as_deref())?;
    let mut cfg = cfg.with_seed(c.seed);
    cfg.rebase(&base);
    cfg.validate()?;
    let corpus = cfg.load_corpus()?;
    cfg.fit_to(&corpus)?;
    prepare_out(&c.out, c.force)?;
    let variants = cfg.variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
    let rows = ablation_suite(&corpus, &cfg.model, &cfg.train, &variants, &cfg.seeds, c.threads)?;
    analysis::write_rows_csv(&rows, &c.out.join("ablation.csv"))?;
    Sidecar::new("ablation", &cfg, &cfg.seeds)?.write(&c.out, "ablation", &["ablation.csv"])?;
    print_means(&rows, &variants.iter().map(|v| v.name()).collect::<Vec<_>>(), None);
    Ok(())
}

fn print_means(rows: &[RunRow], variants: &[&str], size: Option<usize>) {
    for v in variants {
        let src = analysis::mean_over(rows, v, size, RunRow::source);
        let tgt = analysis::mean_over(rows, v, size, RunRow::target_mean);
        match size {
            Some(n) => println!("{v} n={n} source {src:.4} target_mean {tgt:.4}"),
            None => println!("{v} source {src:.4} target_mean {tgt:.4}"),
        }
    }
}

fn top_snapshot(model: &ImoModel) -> Result<MaskSnapshot> {
    let top = model.n_layers();
    model
        .mask_snapshots()
        .into_iter()
        .find(|s| s.layer_index == top)
        .ok_or_else(|| Error::Usage("run has no top-layer mask".into()))
}

fn cmd_analyze_masks(c: &Common, runs: &[PathBuf]) -> Result<()> {
    let (cfg, _) = load_config(c.config.as_deref())?;
    if runs.len() < 2 {
        return Err(Error::Usage("analyze-masks needs at least two --run directories".into()));
    }
    let mut snaps = Vec::new();
    for r in runs {
        let (_, corpus, ck) = load_run(r)?;
        let name = r
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| corpus.source.clone());
        snaps.push((name, top_snapshot(&ck.model)?));
    }
    prepare_out(&c.out, c.force)?;
    let table = mask_similarity(&snaps)?;
    fs::write(c.out.join("similarity.csv"), table.to_csv()?)?;
    let seed = c.seed.unwrap_or(0);
    let mut w = csv::Writer::from_path(c.out.join("baseline.csv"))?;
    w.write_record(["domain_a", "domain_b", "cosine", "cosine_baseline", "jaccard", "jaccard_baseline"])?;
    for i in 0..snaps.len() {
        for j in 0..snaps.len() {
            if i == j {
                continue;
            }
            let (cb, jb) = permutation_baseline(&snaps[i].1, &snaps[j].1, cfg.baselines, seed);
            w.write_record([
                snaps[i].0.clone(),
                snaps[j].0.clone(),
                table.cosine[i][j].to_string(),
                cb.to_string(),
                table.jaccard[i][j].to_string(),
                jb.to_string(),
            ])?;
        }
    }
    w.flush()?;
    let mut side = Sidecar::new("mask-similarity", &runs, &[seed])?;
    side.notes
        .push(format!("{} random-permutation baselines per ordered pair", cfg.baselines));
    side.write(&c.out, "similarity", &["similarity.csv", "baseline.csv"])?;
    print!("{}", table.to_csv()?);
    Ok(())
}

fn cmd_reverse(c: &Common, run: &Path, run_id: &mut Option<String>) -> Result<()> {
    let (cfg, corpus, ck) = load_run(run)?;
    *run_id = Some(ck.run_id.clone());
    let mut train = cfg.train.clone();
    if let Some(s) = c.seed {
        train.seed = s;
    }
    prepare_out(&c.out, c.force)?;
    let (report, model) = reverse_mask_study(&ck.model, &corpus, &train, &ck.run_id)?;
    fs::write(c.out.join("reverse.csv"), report.to_csv()?)?;
    Checkpoint::new(&ck.run_id, ck.stage, f64::NAN, model).save(&c.out.join("complemented.json"))?;
    let mut side = Sidecar::new("reverse-mask", &train, &[train.seed])?;
    side.notes.push(report.note.clone());
    side.notes
        .push(format!("input checkpoint sha256 {}", sha256_hex(&fs::read(run.join(CHECKPOINT))?)));
    side.write(&c.out, "reverse", &["reverse.csv"])?;
    print!("{}", report.to_csv()?);
    Ok(())
}

fn cmd_size_sweep(c: &Common) -> Result<()> {
    let (cfg, _) = load_config(c.config.as_deref())?;
    let cfg = cfg.with_seed(c.seed);
    cfg.validate()?;
    if cfg.data.is_some() {
        return Err(Error::config("data", "size-sweep generates its own corpus from `corpus`"));
    }
    prepare_out(&c.out, c.force)?;
    let rows = size_sweep(&cfg.corpus, &cfg.sizes, &cfg.model, &cfg.train, &cfg.seeds, c.threads)?;
    analysis::write_rows_csv(&rows, &c.out.join("sweep.csv"))?;
    Sidecar::new("size-sweep", &cfg, &cfg.seeds)?.write(&c.out, "sweep", &["sweep.csv"])?;
    for &n in &cfg.sizes {
        print_means(&rows, &["imo", "w/o am"], Some(n));
    }
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ")
}

/// Exit code for an error: 2 for config problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

/// One-line, `key=value` rendering of an error for stderr.
pub fn error_line(e: &Error, run_id: Option<&str>) -> String {
    match e {
        Error::Config { field, message } => {
            format!("error kind=config field={field} message=\"{}\"", escape(message))
        }
        other => format!(
            "error kind=runtime run_id={} message=\"{}\"",
            run_id.unwrap_or("-"),
            escape(&other.to_string())
        ),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut run_id = None;
    let r = match &cli.command {
        Command::GenData(c) => cmd_gen_data(c),
        Command::Train(c) => cmd_train(c, &mut run_id),
        Command::Eval { out } => cmd_eval(out, &mut run_id),
        Command::Ablate(c) => cmd_ablate(c),
        Command::AnalyzeMasks { common, runs } => cmd_analyze_masks(common, runs),
        Command::ReverseMask { common, run } => cmd_reverse(common, run, &mut run_id),
        Command::SizeSweep(c) => cmd_size_sweep(c),
    };
    r.map_err(|e| match (&e, run_id) {
        (Error::Config { .. }, _) | (_, None) => e,
        (_, Some(id)) => Error::Runtime(format!("{id}: {e}")),
    })
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("IMO_LOG_LEVEL", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let id = match &e {
                Error::Runtime(m) => m.split_once(": ").map(|(id, _)| id.to_string()),
                _ => None,
            };
            eprintln!("{}", error_line(&e, id.as_deref().filter(|s| s.starts_with("run-"))));
            exit_code(&e)
        }
    }
}
