//! Synthetic domain-shift corpora and a JSONL loader.
//!
//! Token ids are laid out as: `0` = UNK, then the causal block (`causal_per_label`
//! ids per label), then the spurious block (`spurious_per_label` ids per label),
//! then filler up to `vocab_size`. Every domain uses the same partitions; domains
//! differ only in how often spurious tokens agree with the label.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const UNK: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Probability that a spurious token agrees with the label.
    pub rho: f64,
}

impl DomainSpec {
    pub fn new(name: &str, rho: f64) -> Self {
        Self {
            name: name.to_string(),
            rho,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_labels: usize,
    pub vocab_size: usize,
    pub causal_per_label: usize,
    pub spurious_per_label: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub n_causal: usize,
    pub n_spurious: usize,
    pub p_flip: f64,
    pub source: DomainSpec,
    pub targets: Vec<DomainSpec>,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_labels: 2,
            vocab_size: 200,
            causal_per_label: 8,
            spurious_per_label: 16,
            seq_len_min: 8,
            seq_len_max: 32,
            n_causal: 2,
            n_spurious: 4,
            p_flip: 0.05,
            source: DomainSpec::new("source", 0.95),
            targets: vec![DomainSpec::new("target_a", 0.5), DomainSpec::new("target_b", 0.05)],
            n_train: 10_000,
            n_validation: 1_000,
            n_test: 2_000,
            seed: 0,
        }
    }
}

/// Which split an example stream is drawn for; part of the stream seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Validation => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub domain: String,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl CorpusSpec {
    /// The 4-label variant with the same machinery.
    pub fn multiclass() -> Self {
        Self {
            n_labels: 4,
            ..Self::default()
        }
    }

    pub fn causal_start(&self) -> usize {
        1
    }

    pub fn spurious_start(&self) -> usize {
        1 + self.n_labels * self.causal_per_label
    }

    pub fn filler_start(&self) -> usize {
        self.spurious_start() + self.n_labels * self.spurious_per_label
    }

    pub fn causal_tokens(&self, label: usize) -> std::ops::Range<usize> {
        let a = self.causal_start() + label * self.causal_per_label;
        a..a + self.causal_per_label
    }

    pub fn spurious_tokens(&self, label: usize) -> std::ops::Range<usize> {
        let a = self.spurious_start() + label * self.spurious_per_label;
        a..a + self.spurious_per_label
    }

    /// Label a causal token belongs to, if it is one.
    pub fn causal_label(&self, token: usize) -> Option<usize> {
        (token >= self.causal_start() && token < self.spurious_start()).then(|| (token - self.causal_start()) / self.causal_per_label)
    }

    pub fn spurious_label(&self, token: usize) -> Option<usize> {
        (token >= self.spurious_start() && token < self.filler_start()).then(|| (token - self.spurious_start()) / self.spurious_per_label)
    }

    pub fn domains(&self) -> impl Iterator<Item = &DomainSpec> {
        std::iter::once(&self.source).chain(&self.targets)
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.domains().find(|d| d.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let c = |f: &str, m: &str| Err(Error::config(format!("corpus.{f}"), m));
        if self.n_labels < 2 {
            return c("n_labels", "need at least two labels");
        }
        if self.causal_per_label == 0 {
            return c("causal_per_label", "must be positive");
        }
        if self.n_spurious > 0 && self.spurious_per_label == 0 {
            return c("spurious_per_label", "must be positive when n_spurious > 0");
        }
        if self.filler_start() >= self.vocab_size {
            return c("vocab_size", "too small for the causal and spurious partitions plus filler");
        }
        if !(0.0..=0.5).contains(&self.p_flip) {
            return c("p_flip", "must lie in [0, 0.5]");
        }
        if self.seq_len_min > self.seq_len_max {
            return c("seq_len_min", "exceeds seq_len_max");
        }
        if self.seq_len_min < self.n_causal + self.n_spurious {
            return c("seq_len_min", "must be at least n_causal + n_spurious");
        }
        if self.seq_len_max == 0 {
            return c("seq_len_max", "must be positive");
        }
        let mut names = Vec::new();
        for (i, d) in self.domains().enumerate() {
            let field = if i == 0 {
                "source".to_string()
            } else {
                format!("targets[{}]", i - 1)
            };
            if !(0.0..=1.0).contains(&d.rho) {
                return Err(Error::config(format!("corpus.{field}.rho"), "must lie in [0, 1]"));
            }
            if d.name.is_empty() || names.contains(&d.name) {
                return Err(Error::config(format!("corpus.{field}.name"), "names must be non-empty and unique"));
            }
            names.push(d.name.clone());
        }
        if self.n_train == 0 || self.n_validation == 0 || self.n_test == 0 {
            return c("n_train", "split sizes must be positive");
        }
        Ok(())
    }

    fn rng(&self, domain: &str, split: Split) -> ChaCha8Rng {
        let seed = self
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(fnv1a(domain))
            .wrapping_add(split.tag().wrapping_mul(0x2545_f491_4f6c_dd1d));
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn other_label(&self, rng: &mut ChaCha8Rng, label: usize) -> usize {
        let k = rng.random_range(0..self.n_labels - 1);
        if k >= label {
            k + 1
        } else {
            k
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, range: std::ops::Range<usize>) -> usize {
        rng.random_range(range)
    }

    /// Draws `n` examples for `domain`.
    pub fn generate(&self, domain: &str, split: Split, n: usize) -> Result<Vec<Example>> {
        self.validate()?;
        let d = self
            .domain(domain)
            .ok_or_else(|| Error::config("corpus.domain", format!("unknown domain {domain:?}")))?;
        let mut rng = self.rng(domain, split);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.random_range(0..self.n_labels);
            let len = rng.random_range(self.seq_len_min..=self.seq_len_max);
            let mut tokens = Vec::with_capacity(len);
            for _ in 0..self.n_causal {
                let owner = if rng.random::<f64>() < self.p_flip {
                    self.other_label(&mut rng, label)
                } else {
                    label
                };
                tokens.push(self.draw(&mut rng, self.causal_tokens(owner)));
            }
            for _ in 0..self.n_spurious {
                let owner = if rng.random::<f64>() < d.rho {
                    label
                } else {
                    self.other_label(&mut rng, label)
                };
                tokens.push(self.draw(&mut rng, self.spurious_tokens(owner)));
            }
            while tokens.len() < len {
                tokens.push(self.draw(&mut rng, self.filler_start()..self.vocab_size));
            }
            tokens.shuffle(&mut rng);
            out.push(Example {
                tokens,
                label,
                domain: d.name.clone(),
            });
        }
        Ok(out)
    }

    /// Train/validation from the source domain and a test split per domain.
    pub fn build(&self) -> Result<Corpus> {
        self.validate()?;
        let src = &self.source.name;
        let mut test = Vec::new();
        for d in self.domains() {
            test.extend(self.generate(&d.name, Split::Test, self.n_test)?);
        }
        Ok(Corpus {
            train: self.generate(src, Split::Train, self.n_train)?,
            validation: self.generate(src, Split::Validation, self.n_validation)?,
            test,
            n_labels: self.n_labels,
            vocab: Vocab::identity(self.vocab_size),
            source: src.clone(),
            targets: self.targets.iter().map(|d| d.name.clone()).collect(),
        })
    }
}

/// A labelled corpus ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    /// Test examples of every domain, tagged by `domain`.
    pub test: Vec<Example>,
    pub n_labels: usize,
    pub vocab: Vocab,
    pub source: String,
    pub targets: Vec<String>,
}

impl Corpus {
    pub fn test_domain(&self, name: &str) -> Vec<Example> {
        self.test.iter().filter(|e| e.domain == name).cloned().collect()
    }

    pub fn domain_names(&self) -> Vec<String> {
        std::iter::once(self.source.clone()).chain(self.targets.iter().cloned()).collect()
    }

    /// Same corpus with only the first `n` training examples.
    pub fn with_train_size(&self, n: usize) -> Result<Corpus> {
        if n == 0 || n > self.train.len() {
            return Err(Error::config(
                "sizes",
                format!("size {n} outside 1..={} available training examples", self.train.len()),
            ));
        }
        let mut c = self.clone();
        c.train.truncate(n);
        Ok(c)
    }
}

/// Token-to-id map; id 0 is reserved for unknown tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Vocab of a synthetic corpus: token `i` is written as `t{i}`.
    pub fn identity(size: usize) -> Self {
        let mut tokens = vec!["<unk>".to_string()];
        tokens.extend((1..size).map(|i| format!("t{i}")));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, text: &str, policy: &VocabPolicy) -> Vec<usize> {
        let mut ids: Vec<usize> = text.split_whitespace().map(|w| self.id(&policy.normalize(w))).collect();
        ids.truncate(policy.max_len);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabPolicy {
    /// Minimum training-split count for a token to get its own id.
    pub min_freq: usize,
    /// Cap on vocabulary size, UNK included.
    pub max_size: Option<usize>,
    pub max_len: usize,
    pub ascii_lowercase: bool,
}

impl Default for VocabPolicy {
    fn default() -> Self {
        Self {
            min_freq: 1,
            max_size: None,
            max_len: 64,
            ascii_lowercase: false,
        }
    }
}

impl VocabPolicy {
    fn normalize(&self, w: &str) -> String {
        if self.ascii_lowercase {
            w.to_ascii_lowercase()
        } else {
            w.to_string()
        }
    }

    /// Builds a vocabulary from training texts, most frequent first.
    pub fn build<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(self.normalize(w)).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= self.min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec!["<unk>".to_string()];
        tokens.extend(kept.into_iter().map(|(w, _)| w));
        if let Some(m) = self.max_size {
            tokens.truncate(m.max(1));
        }
        Vocab::from_tokens(tokens)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    text: String,
    label: i64,
    domain: String,
}

/// Raw rows of a JSONL file.
pub fn read_jsonl(path: &Path, n_labels: usize) -> Result<Vec<(String, usize, String)>> {
    let f = fs::File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if parsed.label < 0 || parsed.label as usize >= n_labels {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("label {} outside 0..{n_labels}", parsed.label),
            });
        }
        rows.push((parsed.text, parsed.label as usize, parsed.domain));
    }
    if rows.is_empty() {
        return Err(Error::input(format!("{} holds no examples", path.display())));
    }
    Ok(rows)
}

/// Loads a JSONL file of `{"text", "label", "domain"}` lines. With no `vocab`
/// the file is treated as the training split and a vocabulary is built from it.
pub fn load_jsonl(path: &Path, n_labels: usize, vocab: Option<&Vocab>, policy: &VocabPolicy) -> Result<(Vec<Example>, Vocab)> {
    let rows = read_jsonl(path, n_labels)?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => policy.build(rows.iter().map(|r| r.0.as_str())),
    };
    let examples = rows
        .into_iter()
        .map(|(text, label, domain)| Example {
            tokens: vocab.encode(&text, policy),
            label,
            domain,
        })
        .collect();
    Ok((examples, vocab))
}

pub const MANIFEST: &str = "manifest.json";
pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "validation.jsonl", "test.jsonl"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: CorpusSpec,
    pub seed: u64,
    /// `(file name, sha256 hex)` per split file.
    pub checksums: Vec<(String, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_jsonl(examples: &[Example], vocab: &Vocab) -> Result<String> {
    #[derive(Serialize)]
    struct Out<'a> {
        text: String,
        label: usize,
        domain: &'a str,
    }
    let mut s = String::new();
    for e in examples {
        s.push_str(&serde_json::to_string(&Out {
            text: vocab.decode(&e.tokens),
            label: e.label,
            domain: &e.domain,
        })?);
        s.push('\n');
    }
    Ok(s)
}

/// Writes the three split files plus a manifest into `dir`.
pub fn write_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Manifest> {
    let corpus = spec.build()?;
    fs::create_dir_all(dir)?;
    let mut checksums = Vec::new();
    for (name, split) in SPLIT_FILES.iter().zip([&corpus.train, &corpus.validation, &corpus.test]) {
        let body = to_jsonl(split, &corpus.vocab)?;
        fs::write(dir.join(name), &body)?;
        checksums.push((name.to_string(), sha256_hex(body.as_bytes())));
    }
    let manifest = Manifest {
        spec: spec.clone(),
        seed: spec.seed,
        checksums,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Reads a corpus directory written by [`write_corpus`], verifying checksums.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    for (name, sum) in &manifest.checksums {
        let got = sha256_hex(&fs::read(dir.join(name))?);
        if &got != sum {
            return Err(Error::input(format!("{name}: checksum mismatch")));
        }
    }
    let spec = &manifest.spec;
    let vocab = Vocab::identity(spec.vocab_size);
    let policy = VocabPolicy {
        max_len: usize::MAX,
        ..VocabPolicy::default()
    };
    let load = |name: &str| load_jsonl(&dir.join(name), spec.n_labels, Some(&vocab), &policy).map(|r| r.0);
    Ok(Corpus {
        train: load(SPLIT_FILES[0])?,
        validation: load(SPLIT_FILES[1])?,
        test: load(SPLIT_FILES[2])?,
        n_labels: spec.n_labels,
        vocab: vocab.clone(),
        source: spec.source.name.clone(),
        targets: spec.targets.iter().map(|d| d.name.clone()).collect(),
    })
}

/// Token ids of the two-feature task.
pub mod two_feature {
    /// Causal token of label 1; embeds as `[1, 0]`.
    pub const CAUSAL_ON: usize = 1;
    /// Causal token of label 0; embeds as `[0, 0]`.
    pub const CAUSAL_OFF: usize = 2;
    /// Noise token embedding as `[0, 1]`.
    pub const NOISE_ON: usize = 3;
    /// Noise token embedding as `[0, 0]`.
    pub const NOISE_OFF: usize = 4;
    pub const VOCAB: usize = 5;
    /// Row `i` is the fixed 2-d embedding of token `i`.
    pub const EMBEDDING: [[f64; 2]; VOCAB] = [[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
}

/// Two-token sequences: a causal token that determines the label and an
/// independent coin-flip noise token, in random order.
pub fn two_feature_task(seed: u64, n: usize) -> Vec<Example> {
    use two_feature::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let label = rng.random_range(0..2);
            let a = if label == 1 { CAUSAL_ON } else { CAUSAL_OFF };
            let b = if rng.random::<bool>() { NOISE_ON } else { NOISE_OFF };
            let tokens = if rng.random::<bool>() { vec![a, b] } else { vec![b, a] };
            Example {
                tokens,
                label,
                domain: "two_feature".into(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_train: 2000,
            n_validation: 200,
            n_test: 2000,
            ..CorpusSpec::default()
        }
    }

    fn vote(tokens: &[usize], f: impl Fn(usize) -> Option<usize>, n_labels: usize) -> usize {
        let mut counts = vec![0usize; n_labels];
        for &t in tokens {
            if let Some(l) = f(t) {
                counts[l] += 1;
            }
        }
        // ties resolve to the lowest label
        let mut best = 0;
        for (i, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = i;
            }
        }
        best
    }

    #[test]
    fn default_spec_is_valid_and_partitions_are_disjoint() {
        let s = CorpusSpec::default();
        s.validate().unwrap();
        assert_eq!(s.causal_tokens(1), 9..17);
        assert_eq!(s.spurious_tokens(0), 17..33);
        assert_eq!(s.filler_start(), 49);
        for t in 0..s.vocab_size {
            let hits = [s.causal_label(t).is_some(), s.spurious_label(t).is_some(), t >= s.filler_start()];
            assert!(hits.iter().filter(|&&h| h).count() <= 1);
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let bad = CorpusSpec {
            p_flip: 0.7,
            ..CorpusSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "corpus.p_flip"));
        let bad = CorpusSpec {
            seq_len_min: 5,
            ..CorpusSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "corpus.seq_len_min"));
    }

    #[test]
    fn perfect_spurious_correlation_gives_perfect_vote() {
        let spec = CorpusSpec {
            p_flip: 0.0,
            source: DomainSpec::new("source", 1.0),
            ..small()
        };
        for e in spec.generate("source", Split::Test, 500).unwrap() {
            assert_eq!(vote(&e.tokens, |t| spec.spurious_label(t), 2), e.label);
        }
    }

    #[test]
    fn causal_vote_is_perfect_without_flips() {
        let spec = CorpusSpec { p_flip: 0.0, ..small() };
        for d in ["source", "target_a", "target_b"] {
            for e in spec.generate(d, Split::Test, 300).unwrap() {
                assert_eq!(vote(&e.tokens, |t| spec.causal_label(t), 2), e.label);
            }
        }
    }

    #[test]
    fn half_correlation_vote_by_enumeration() {
        // label y uniform, two spurious tokens each agreeing w.p. 1/2, ties -> 0
        let mut expected = 0.0;
        for y in 0..2 {
            for agree in [[true, true], [true, false], [false, true], [false, false]] {
                let labels: Vec<usize> = agree.iter().map(|&a| if a { y } else { 1 - y }).collect();
                let ones = labels.iter().filter(|&&l| l == 1).count();
                let pred = usize::from(ones > 1);
                if pred == y {
                    expected += 0.5 * 0.25;
                }
            }
        }
        assert_eq!(expected, 0.5);
        let spec = CorpusSpec {
            n_spurious: 2,
            source: DomainSpec::new("source", 0.5),
            ..small()
        };
        let ex = spec.generate("source", Split::Test, 20_000).unwrap();
        let hits = ex
            .iter()
            .filter(|e| vote(&e.tokens, |t| spec.spurious_label(t), 2) == e.label)
            .count() as f64;
        let acc = hits / ex.len() as f64;
        let sigma = (0.25f64 / ex.len() as f64).sqrt();
        assert!((acc - expected).abs() < 3.0 * sigma, "{acc}");
    }

    #[test]
    fn generation_is_deterministic() {
        let s = small();
        assert_eq!(s.build().unwrap(), s.build().unwrap());
        let other = CorpusSpec { seed: 1, ..small() };
        assert_ne!(s.build().unwrap().train, other.build().unwrap().train);
    }

    #[test]
    fn label_marginal_and_agreement_rates() {
        let spec = small();
        let c = spec.build().unwrap();
        for split in [&c.train, &c.validation] {
            let n = split.len() as f64;
            let ones = split.iter().filter(|e| e.label == 1).count() as f64;
            assert!((ones / n - 0.5).abs() < 3.0 * (0.25 / n).sqrt());
        }
        for d in spec.domains() {
            let ex = c.test_domain(&d.name);
            let (mut agree, mut total) = (0usize, 0usize);
            for e in &ex {
                for &t in &e.tokens {
                    if let Some(l) = spec.spurious_label(t) {
                        total += 1;
                        agree += usize::from(l == e.label);
                    }
                }
            }
            let rate = agree as f64 / total as f64;
            let sigma = (d.rho * (1.0 - d.rho) / total as f64).sqrt().max(1e-3);
            assert!((rate - d.rho).abs() < 3.0 * sigma, "{}: {rate}", d.name);
        }
    }

    #[test]
    fn sequences_respect_lengths_and_vocab() {
        let spec = small();
        for e in spec.generate("target_b", Split::Train, 500).unwrap() {
            assert!(e.tokens.len() >= spec.seq_len_min && e.tokens.len() <= spec.seq_len_max);
            assert!(e.tokens.iter().all(|&t| t > 0 && t < spec.vocab_size));
            assert_eq!(e.tokens.iter().filter(|&&t| spec.causal_label(t).is_some()).count(), 2);
            assert_eq!(e.tokens.iter().filter(|&&t| spec.spurious_label(t).is_some()).count(), 4);
        }
    }

    fn plug_in_mi(pairs: &[(usize, usize)]) -> f64 {
        let n = pairs.len() as f64;
        let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
        let mut px: HashMap<usize, f64> = HashMap::new();
        let mut py: HashMap<usize, f64> = HashMap::new();
        for &(x, y) in pairs {
            *joint.entry((x, y)).or_default() += 1.0;
            *px.entry(x).or_default() += 1.0;
            *py.entry(y).or_default() += 1.0;
        }
        joint.iter().map(|(&(x, y), &c)| c / n * ((c * n) / (px[&x] * py[&y])).ln()).sum()
    }

    #[test]
    fn two_feature_information() {
        use two_feature::*;
        let ex = two_feature_task(7, 10_000);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for e in &ex {
            let causal = *e.tokens.iter().find(|&&t| t == CAUSAL_ON || t == CAUSAL_OFF).unwrap();
            let noise = *e.tokens.iter().find(|&&t| t == NOISE_ON || t == NOISE_OFF).unwrap();
            assert_eq!(e.label, usize::from(causal == CAUSAL_ON));
            a.push((causal, e.label));
            b.push((noise, e.label));
        }
        assert!(plug_in_mi(&b).abs() < 0.01);
        assert!((plug_in_mi(&a) - 2f64.ln()).abs() < 0.01);
    }

    fn write_file(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    #[test]
    fn jsonl_single_line() {
        let f = write_file("{\"text\":\"good movie\",\"label\":1,\"domain\":\"imdb\"}\n");
        let (ex, vocab) = load_jsonl(f.path(), 2, None, &VocabPolicy::default()).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].tokens.len(), 2);
        assert_eq!(ex[0].label, 1);
        assert_eq!(vocab.len(), 3);
    }

    #[test]
    fn jsonl_errors() {
        let f = write_file("");
        assert!(matches!(
            load_jsonl(f.path(), 2, None, &VocabPolicy::default()),
            Err(Error::Input(_))
        ));
        let f = write_file("{\"text\":\"a\",\"label\":0,\"domain\":\"x\"}\n{not json}\n");
        assert!(matches!(
            load_jsonl(f.path(), 2, None, &VocabPolicy::default()),
            Err(Error::Parse { line: 2, .. })
        ));
        let f = write_file("{\"text\":\"a\",\"label\":3,\"domain\":\"x\"}\n");
        assert!(matches!(
            load_jsonl(f.path(), 2, None, &VocabPolicy::default()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn unseen_tokens_map_to_unk_and_truncate() {
        let train = write_file("{\"text\":\"a b b\",\"label\":0,\"domain\":\"x\"}\n");
        let policy = VocabPolicy {
            max_len: 3,
            ..VocabPolicy::default()
        };
        let (_, vocab) = load_jsonl(train.path(), 2, None, &policy).unwrap();
        assert_eq!(vocab.id("b"), 1);
        let test = write_file("{\"text\":\"b zzz a a a\",\"label\":1,\"domain\":\"y\"}\n");
        let (ex, _) = load_jsonl(test.path(), 2, Some(&vocab), &policy).unwrap();
        assert_eq!(ex[0].tokens, vec![1, UNK, 2]);
    }

    #[test]
    fn corpus_files_round_trip() {
        let spec = CorpusSpec {
            n_train: 50,
            n_validation: 10,
            n_test: 10,
            ..CorpusSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m1 = write_corpus(&spec, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("test.jsonl")).unwrap();
        let m2 = write_corpus(&spec, dir.path()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(bytes, fs::read(dir.path().join("test.jsonl")).unwrap());
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back, spec.build().unwrap());
    }
}
