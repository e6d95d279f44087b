use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const CORPUS: &str = r#""corpus": {"vocab_size": 60, "causal_per_label": 2, "spurious_per_label": 4,
    "seq_len_min": 6, "seq_len_max": 12, "n_train": 120, "n_validation": 40, "n_test": 40}"#;

const MODEL: &str = r#""model": {"encoder": {"vocab_size": 60, "d_model": 8, "n_layers": 2, "n_heads": 2, "d_ff": 8, "max_len": 12}}"#;

const TRAIN: &str = r#""train": {"epochs_per_stage": 1, "batch_size": 16, "lr": 0.001}"#;

fn imo(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_imo"));
    cmd.args(args);
    for (flag, p) in paths {
        cmd.arg(flag).arg(p);
    }
    cmd.output().unwrap()
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join(format!("config{}.json", fs::read_dir(dir).unwrap().count()));
    let body = [MODEL, TRAIN, CORPUS, extra]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(",\n");
    fs::write(&p, format!("{{{body}}}")).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(tmp: &TempDir, cfg: &Path, out: &str, seed: &str) -> PathBuf {
    let dir = tmp.path().join(out);
    let o = imo(&["train", "--seed", seed], &[("--config", cfg), ("--out", &dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn gen_data_is_byte_identical_on_rerun() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = imo(&["gen-data", "--seed", "4"], &[("--config", &cfg), ("--out", d)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["manifest.json", "train.jsonl", "validation.jsonl", "test.jsonl"] {
        let x = fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_rerun_reproduces_metrics() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "");
    let a = train(&tmp, &cfg, "a", "1");
    let b = train(&tmp, &cfg, "b", "1");
    for f in ["metrics.csv", "checkpoint.json", "masks.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = train(&tmp, &cfg, "c", "2");
    assert_ne!(
        fs::read(a.join("checkpoint.json")).unwrap(),
        fs::read(c.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn train_writes_run_directory() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "");
    let run = train(&tmp, &cfg, "run", "0");
    for f in [
        "config.json",
        "run.json",
        "metrics.csv",
        "checkpoint.json",
        "masks.json",
        "attention.jsonl",
        "stages/stage_0.json",
        "stages/stage_1.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let header = metrics.lines().next().unwrap();
    assert_eq!(header, "run_id,stage,epoch,split,metric_name,value,sparsity_fraction,wallclock_s");
    assert!(metrics.lines().last().unwrap().contains(",selected,validation,"));
    assert!(metrics.contains("test:target_b"));
}

#[test]
fn eval_matches_train_scores() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "");
    let run = train(&tmp, &cfg, "run", "0");
    let o = imo(&["eval"], &[("--out", &run)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let read = |file: &str, split_col: usize, value_col: usize| -> Vec<(String, String)> {
        let mut r = csv::Reader::from_path(run.join(file)).unwrap();
        r.records()
            .map(|x| x.unwrap())
            .filter(|x| x[split_col].starts_with("test:"))
            .map(|x| (x[split_col].to_string(), x[value_col].to_string()))
            .collect()
    };
    let from_train = read("metrics.csv", 3, 5);
    let from_eval = read("eval.csv", 1, 3);
    assert_eq!(from_train.len(), 3);
    assert_eq!(from_train, from_eval);
}

#[test]
fn out_of_range_masked_layers_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, format!("{{{MODEL}, {CORPUS}, \"train\": {{\"max_masked_layers\": 3}}}}")).unwrap();
    let o = imo(&["train"], &[("--config", &cfg), ("--out", &tmp.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error kind=config field=train.max_masked_layers "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn unknown_field_names_its_path() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"alpah": 0.1}}"#).unwrap();
    let o = imo(&["train"], &[("--config", &cfg), ("--out", &tmp.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("field=train"), "{}", stderr(&o));
}

#[test]
fn non_empty_out_needs_force() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("data");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let o = imo(&["gen-data"], &[("--config", &cfg), ("--out", &out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind=runtime"), "{}", stderr(&o));
    let o = imo(&["gen-data", "--force"], &[("--config", &cfg), ("--out", &out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("train.jsonl").is_file());
}

#[test]
fn train_from_generated_corpus_directory() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let gen = config(tmp.path(), "");
    assert!(imo(&["gen-data"], &[("--config", &gen), ("--out", &data)]).status.success());
    let cfg = config(
        tmp.path(),
        &format!(r#""data": {{"format": "corpus", "dir": "{}"}}"#, data.display()),
    );
    let run = train(&tmp, &cfg, "run", "0");
    assert!(fs::read_to_string(run.join("metrics.csv")).unwrap().contains("test:source"));
}

#[test]
fn analysis_commands_write_reports() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(
        tmp.path(),
        r#""seeds": [0], "sizes": [40, 120], "variants": ["imo", "wo_am"], "baselines": 5"#,
    );
    let a = train(&tmp, &cfg, "a", "0");
    let b = train(&tmp, &cfg, "b", "1");

    let out = tmp.path().join("sim");
    let o = Command::new(env!("CARGO_BIN_EXE_imo"))
        .arg("analyze-masks")
        .arg("--run")
        .arg(&a)
        .arg(&b)
        .arg("--out")
        .arg(&out)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("similarity.csv").is_file() && out.join("baseline.csv").is_file());

    let out = tmp.path().join("rev");
    let o = imo(&["reverse-mask"], &[("--run", &a), ("--out", &out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(out.join("reverse.csv"))
        .unwrap()
        .starts_with("domain,original,complemented,delta"));

    let out = tmp.path().join("abl");
    let o = imo(&["ablate"], &[("--config", &cfg), ("--out", &out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 3);

    let out = tmp.path().join("sweep");
    let o = imo(&["size-sweep"], &[("--config", &cfg), ("--out", &out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("sweep.csv")).unwrap().lines().count(), 5);
}
