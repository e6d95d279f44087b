//! Token-level attention classification heads.
//!
//! Binary: the top-layer filtering vector is the attention query,
//! `a_i = m . e_i`, `v = sum_i a_i e_i`, `y = softmax(v P)`.
//!
//! Multi-class: one mask per label. Each label gets its own masked states,
//! weights and pooled vector, projected to a scalar `c_y = v_y . p_y`, and
//! `y = softmax(c)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Flags that change the head's arithmetic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadOptions {
    /// Softmax the attention weights over positions before pooling.
    #[serde(default)]
    pub normalize_attention: bool,
    /// Multi-class only: pool the unmasked states `h_i` instead of the
    /// per-label masked states `e_{y,i}`.
    #[serde(default)]
    pub shared_embeddings: bool,
}

/// Values produced by a head for one sequence.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// Attention weights, one `[T]` vector per query (one for binary).
    pub attention: Vec<Var>,
    /// Pre-softmax scores over labels.
    pub logits: Var,
}

fn attention_pool(tape: &mut Tape, keys: Var, query: Var, values: Var, opts: HeadOptions) -> Result<(Var, Var)> {
    let a = tape.matmul(keys, query)?;
    let a = if opts.normalize_attention { tape.softmax(a)? } else { a };
    let v = tape.matmul(a, values)?;
    Ok((a, v))
}

fn check_states(tape: &Tape, states: Var, width: usize) -> Result<()> {
    let s = tape.shape(states);
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::input(format!("head needs a non-empty [T, d] sequence, got {s:?}")));
    }
    if s[1] != width {
        return Err(Error::Shape {
            op: "head",
            lhs: s.to_vec(),
            rhs: vec![width],
        });
    }
    Ok(())
}

/// Binary head over masked top-layer states `e` (`[T, d]`), query `m` (`[d]`)
/// and projection `p` (`[d, 2]`).
pub fn binary_forward(tape: &mut Tape, e: Var, m: Var, p: Var, opts: HeadOptions) -> Result<HeadOutput> {
    let d = tape.shape(m).first().copied().unwrap_or(0);
    check_states(tape, e, d)?;
    let (a, v) = attention_pool(tape, e, m, e, opts)?;
    let logits = tape.matmul(v, p)?;
    Ok(HeadOutput {
        attention: vec![a],
        logits,
    })
}

/// Multi-class head over raw top-layer states `h` (`[T, d]`), per-label
/// filtering vectors and per-label projection vectors (each `[d]`).
pub fn multiclass_forward(tape: &mut Tape, h: Var, masks: &[Var], projections: &[Var], opts: HeadOptions) -> Result<HeadOutput> {
    if masks.len() < 2 || masks.len() != projections.len() {
        return Err(Error::input(format!(
            "multi-class head needs N >= 2 masks and as many projections, got {} and {}",
            masks.len(),
            projections.len()
        )));
    }
    let d = tape.shape(masks[0]).first().copied().unwrap_or(0);
    check_states(tape, h, d)?;
    let mut attention = Vec::with_capacity(masks.len());
    let mut scores = Vec::with_capacity(masks.len());
    for (&m, &p) in masks.iter().zip(projections) {
        let (a, v) = if opts.shared_embeddings {
            attention_pool(tape, h, m, h, opts)?
        } else {
            let e = crate::masking::apply_mask(tape, h, m)?;
            attention_pool(tape, e, m, e, opts)?
        };
        attention.push(a);
        scores.push(tape.matmul(v, p)?);
    }
    let logits = tape.concat(&scores)?;
    Ok(HeadOutput { attention, logits })
}

/// Mean cosine similarity over ordered pairs of distinct masks.
pub fn distance_loss(tape: &mut Tape, masks: &[Var]) -> Result<Var> {
    let n = masks.len();
    if n < 2 {
        return Err(Error::input("distance loss needs at least two masks"));
    }
    let mut terms = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            terms.push(tape.cosine(masks[i], masks[j])?);
        }
    }
    // cos is symmetric: each unordered pair stands for two ordered ones
    let stacked = tape.concat(&terms)?;
    let total = tape.sum(stacked)?;
    tape.scale(total, 2.0 / (n * (n - 1)) as f64)
}

/// One exported example: tokens, per-query attention weights and labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub tokens: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub predicted: usize,
    pub gold: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn mat(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn vec_(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::vector(v.to_vec())).unwrap()
    }

    #[test]
    fn binary_hand_example() {
        let mut tape = Tape::new();
        let e = mat(&mut tape, &[vec![2.0, 3.0], vec![1.0, 1.0]]);
        let m = vec_(&mut tape, &[1.0, 0.0]);
        let p = mat(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = binary_forward(&mut tape, e, m, p, HeadOptions::default()).unwrap();
        assert_eq!(tape.value(out.attention[0]).data(), &[2.0, 1.0]);
        assert_eq!(tape.value(out.logits).data(), &[5.0, 7.0]);
    }

    #[test]
    fn binary_zero_mask_is_uniform() {
        let mut tape = Tape::new();
        let e = mat(&mut tape, &[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let m = vec_(&mut tape, &[0.0, 0.0]);
        let p = mat(&mut tape, &[vec![0.3, -0.1], vec![2.0, 1.0]]);
        let out = binary_forward(&mut tape, e, m, p, HeadOptions::default()).unwrap();
        let probs = tape.softmax(out.logits).unwrap();
        assert_eq!(tape.value(probs).data(), &[0.5, 0.5]);
    }

    #[test]
    fn binary_empty_sequence_is_rejected() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(vec![0, 2])).unwrap();
        let m = vec_(&mut tape, &[1.0, 0.0]);
        let p = mat(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            binary_forward(&mut tape, e, m, p, HeadOptions::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn multiclass_identical_masks_are_uniform() {
        let mut tape = Tape::new();
        let h = mat(&mut tape, &[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, 0.1]]);
        let m: Vec<Var> = (0..3).map(|_| vec_(&mut tape, &[0.5, 1.0, -0.4])).collect();
        let p: Vec<Var> = (0..3).map(|_| vec_(&mut tape, &[0.1, 0.2, 0.3])).collect();
        let out = multiclass_forward(&mut tape, h, &m, &p, HeadOptions::default()).unwrap();
        let probs = tape.softmax(out.logits).unwrap();
        for &v in tape.value(probs).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn multiclass_zero_mask_scores_zero() {
        let mut tape = Tape::new();
        let h = mat(&mut tape, &[vec![0.3, -1.0], vec![1.5, 0.2]]);
        let m = vec![vec_(&mut tape, &[0.0, 0.0]), vec_(&mut tape, &[1.0, 2.0])];
        let p = vec![vec_(&mut tape, &[5.0, 5.0]), vec_(&mut tape, &[1.0, 1.0])];
        let out = multiclass_forward(&mut tape, h, &m, &p, HeadOptions::default()).unwrap();
        assert_eq!(tape.value(out.logits).data()[0], 0.0);
    }

    #[test]
    fn multiclass_hand_instance() {
        // d = 2, T = 2, N = 2, worked by hand:
        // h1 = [1, 2], h2 = [3, -1]; m0 = [1, 0]; m1 = [0.5, 1]
        // label 0: e = [1,0],[3,0]; a = [1, 3]; v = [10, 0]; p0 = [1, 1] -> c0 = 10
        // label 1: e = [0.5,2],[1.5,-1]; a = [0.25+2, 0.75-1] = [2.25, -0.25]
        //          v = 2.25*[0.5,2] - 0.25*[1.5,-1] = [0.75, 4.75]; p1 = [2, -1] -> c1 = -3.25
        let mut tape = Tape::new();
        let h = mat(&mut tape, &[vec![1.0, 2.0], vec![3.0, -1.0]]);
        let m = vec![vec_(&mut tape, &[1.0, 0.0]), vec_(&mut tape, &[0.5, 1.0])];
        let p = vec![vec_(&mut tape, &[1.0, 1.0]), vec_(&mut tape, &[2.0, -1.0])];
        let out = multiclass_forward(&mut tape, h, &m, &p, HeadOptions::default()).unwrap();
        let c = tape.value(out.logits).data().to_vec();
        assert!((c[0] - 10.0).abs() < 1e-12 && (c[1] + 3.25).abs() < 1e-12, "{c:?}");
        let probs = tape.softmax(out.logits).unwrap();
        let z = (10.0f64).exp() + (-3.25f64).exp();
        assert!((tape.value(probs).data()[0] - 10.0f64.exp() / z).abs() < 1e-12);
    }

    #[test]
    fn distance_loss_examples() {
        let mut tape = Tape::new();
        let a = vec_(&mut tape, &[1.0, 2.0, 0.0]);
        let b = vec_(&mut tape, &[1.0, 2.0, 0.0]);
        let c = vec_(&mut tape, &[0.0, 0.0, 3.0]);
        let l = distance_loss(&mut tape, &[a, b]).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
        let l = distance_loss(&mut tape, &[a, c]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let l = distance_loss(&mut tape, &[a, b, c]).unwrap();
        assert!((tape.value(l).item() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn distance_loss_zero_mask_counts_as_zero() {
        let mut tape = Tape::new();
        let a = vec_(&mut tape, &[1.0, 2.0]);
        let z = vec_(&mut tape, &[0.0, 0.0]);
        let l = distance_loss(&mut tape, &[a, z]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }
}
