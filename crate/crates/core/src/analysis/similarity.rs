//! Cosine and Jaccard similarity between mask exports.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskSnapshot;

/// Cosine similarity; 0 (with a warning) when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine of a zero vector reported as 0");
        return 0.0;
    }
    dot / (na * nb)
}

/// Intersection over union of the kept sets; 1 when both are empty.
pub fn jaccard(qa: &[f64], qb: &[f64]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in qa.iter().zip(qb) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub domains: Vec<String>,
    /// Pairwise cosine of the filtering vectors `m`.
    pub cosine: Vec<Vec<f64>>,
    /// Pairwise Jaccard of the binary masks `q`.
    pub jaccard: Vec<Vec<f64>>,
}

/// Pairwise similarities of per-domain mask exports. The diagonal is 1 by
/// definition.
pub fn mask_similarity(snapshots: &[(String, MaskSnapshot)]) -> Result<SimilarityTable> {
    if snapshots.len() < 2 {
        return Err(Error::input("similarity needs at least two mask exports"));
    }
    let d = snapshots[0].1.m.len();
    if let Some((name, _)) = snapshots.iter().find(|(_, s)| s.m.len() != d || s.q.len() != d) {
        return Err(Error::input(format!("mask export {name:?} has a different width than {d}")));
    }
    let n = snapshots.len();
    let mut cos = vec![vec![1.0; n]; n];
    let mut jac = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&snapshots[i].1, &snapshots[j].1);
            cos[i][j] = cosine(&a.m, &b.m);
            cos[j][i] = cos[i][j];
            jac[i][j] = jaccard(&a.q, &b.q);
            jac[j][i] = jac[i][j];
        }
    }
    Ok(SimilarityTable {
        domains: snapshots.iter().map(|(d, _)| d.clone()).collect(),
        cosine: cos,
        jaccard: jac,
    })
}

impl SimilarityTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["domain_a", "domain_b", "cosine", "jaccard"])?;
        for i in 0..self.domains.len() {
            for j in 0..self.domains.len() {
                w.write_record([
                    self.domains[i].clone(),
                    self.domains[j].clone(),
                    self.cosine[i][j].to_string(),
                    self.jaccard[i][j].to_string(),
                ])?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Runtime(e.to_string()))?).map_err(|e| Error::Runtime(e.to_string()))
    }
}

/// Mean cosine and Jaccard of `a` against `n` randomly permuted and
/// sign-flipped copies of `b`.
pub fn permutation_baseline(a: &MaskSnapshot, b: &MaskSnapshot, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = b.m.len();
    let (mut c, mut j) = (0.0, 0.0);
    for _ in 0..n {
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(&mut rng);
        let m: Vec<f64> = perm.iter().map(|&k| if rng.random::<bool>() { b.m[k] } else { -b.m[k] }).collect();
        let q: Vec<f64> = perm.iter().map(|&k| b.q[k]).collect();
        c += cosine(&a.m, &m);
        j += jaccard(&a.q, &q);
    }
    (c / n as f64, j / n as f64)
}
