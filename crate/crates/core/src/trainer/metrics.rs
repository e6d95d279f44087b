//! Accuracy and macro-F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroF1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro_f1",
        }
    }

    /// Accuracy for binary tasks, macro-F1 otherwise.
    pub fn for_labels(n_labels: usize) -> Self {
        if n_labels > 2 {
            Metric::MacroF1
        } else {
            Metric::Accuracy
        }
    }

    pub fn score(self, pred: &[usize], gold: &[usize], n_labels: usize) -> Result<f64> {
        match self {
            Metric::Accuracy => accuracy(pred, gold),
            Metric::MacroF1 => macro_f1(pred, gold, n_labels),
        }
    }
}

fn check(pred: &[usize], gold: &[usize]) -> Result<()> {
    if gold.is_empty() {
        return Err(Error::input("cannot score an empty dataset"));
    }
    if pred.len() != gold.len() {
        return Err(Error::input(format!("{} predictions for {} labels", pred.len(), gold.len())));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check(pred, gold)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// `counts[gold][pred]`.
pub fn confusion(pred: &[usize], gold: &[usize], n_labels: usize) -> Result<Vec<Vec<usize>>> {
    check(pred, gold)?;
    let mut c = vec![vec![0usize; n_labels]; n_labels];
    for (&p, &g) in pred.iter().zip(gold) {
        if p >= n_labels || g >= n_labels {
            return Err(Error::input(format!("label {} outside 0..{n_labels}", p.max(g))));
        }
        c[g][p] += 1;
    }
    Ok(c)
}

/// Unweighted mean of per-class F1. A class with no gold and no predicted
/// instances scores 0.
pub fn macro_f1(pred: &[usize], gold: &[usize], n_labels: usize) -> Result<f64> {
    let c = confusion(pred, gold, n_labels)?;
    let mut total = 0.0;
    for k in 0..n_labels {
        let tp = c[k][k] as f64;
        let gold_k: usize = c[k].iter().sum();
        let pred_k: usize = c.iter().map(|row| row[k]).sum();
        let denom = (gold_k + pred_k) as f64;
        if denom > 0.0 {
            total += 2.0 * tp / denom;
        }
    }
    Ok(total / n_labels as f64)
}
