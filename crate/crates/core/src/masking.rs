//! Learnable feature masks.
//!
//! A [`FilterLayer`] owns a weight vector `r` and a threshold `s`. The binary
//! gate is `q = g(|r| - s)` with `g` the unit step, and the filtering vector
//! is `m = r * q`. Token states are filtered as `e_i = h_i * m`.

use serde::{Deserialize, Serialize};

use crate::encoder::Init;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::{StepEstimator, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskVariant {
    /// Hard gate trained with the long-tailed step estimator.
    #[default]
    LongTailed,
    /// Hard gate trained with a clipped straight-through estimator.
    Ste,
    /// Soft-threshold reparameterization: `m = sign(r) relu(|r| - sigmoid(s))`.
    Str,
    /// Hard gate with one shared threshold for every feature.
    Scalar,
}

impl MaskVariant {
    pub fn estimator(self) -> StepEstimator {
        match self {
            MaskVariant::Ste => StepEstimator::Clipped,
            _ => StepEstimator::LongTailed,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskVariant::LongTailed => "long_tailed",
            MaskVariant::Ste => "ste",
            MaskVariant::Str => "str",
            MaskVariant::Scalar => "scalar",
        }
    }
}

/// Initial values for `r` and `s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskInit {
    pub r_mean: f64,
    pub r_std: f64,
    pub s: f64,
    /// Threshold init for the soft-threshold variant, where the effective
    /// threshold is `sigmoid(s)`.
    pub s_str: f64,
}

impl Default for MaskInit {
    fn default() -> Self {
        Self {
            r_mean: 0.1,
            r_std: 0.01,
            s: 0.05,
            // sigmoid(-2.944) = 0.05
            s_str: -2.944_438_979_166_44,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterLayer {
    /// 1-based transformer layer this mask sits on.
    pub layer_index: usize,
    /// Label the mask belongs to (per-label masks of the multi-class head).
    pub label: Option<usize>,
    pub r: ParamId,
    pub s: ParamId,
    pub variant: MaskVariant,
    /// Use `|1 - q|` in place of `q`.
    #[serde(default)]
    pub complement: bool,
}

/// Step pre-activation `|r| - s`, broadcasting a scalar threshold.
pub fn pre_activation(r: &[f64], s: &[f64]) -> Vec<f64> {
    r.iter()
        .enumerate()
        .map(|(i, v)| v.abs() - s[if s.len() == 1 { 0 } else { i }])
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn str_values(r: &[f64], s: &[f64]) -> Vec<f64> {
    r.iter()
        .enumerate()
        .map(|(i, v)| {
            let thr = sigmoid(s[if s.len() == 1 { 0 } else { i }]);
            v.signum() * (v.abs() - thr).max(0.0)
        })
        .collect()
}

/// `q` for raw parameter values. For the soft-threshold variant `q` marks the
/// nonzero entries of `m`.
pub fn binary_mask_values(variant: MaskVariant, r: &[f64], s: &[f64]) -> Vec<f64> {
    match variant {
        MaskVariant::Str => str_values(r, s).into_iter().map(|m| if m != 0.0 { 1.0 } else { 0.0 }).collect(),
        _ => pre_activation(r, s).into_iter().map(crate::tensor::unit_step_value).collect(),
    }
}

/// `m` for raw parameter values.
pub fn filtering_vector_values(variant: MaskVariant, r: &[f64], s: &[f64], complement: bool) -> Vec<f64> {
    if variant == MaskVariant::Str && !complement {
        return str_values(r, s);
    }
    let q = binary_mask_values(variant, r, s);
    r.iter()
        .zip(q)
        .map(|(rv, qv)| rv * if complement { (1.0 - qv).abs() } else { qv })
        .collect()
}

/// `sum_i exp(-s_i)`; a scalar threshold counts once per feature.
pub fn sparsity_loss_values(s: &[f64], d: usize) -> f64 {
    if s.len() == 1 && d != 1 {
        d as f64 * (-s[0]).exp()
    } else {
        s.iter().map(|v| (-v).exp()).sum()
    }
}

/// Share of features whose gate is closed.
pub fn sparsity_fraction_values(q: &[f64]) -> f64 {
    if q.is_empty() {
        return 0.0;
    }
    q.iter().filter(|&&v| v == 0.0).count() as f64 / q.len() as f64
}

impl FilterLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        layer_index: usize,
        label: Option<usize>,
        d: usize,
        variant: MaskVariant,
        mask_init: &MaskInit,
    ) -> Self {
        let r = store.add(format!("{prefix}.r"), init.normal(vec![d], mask_init.r_mean, mask_init.r_std));
        let s_value = if variant == MaskVariant::Str {
            mask_init.s_str
        } else {
            mask_init.s
        };
        let s_tensor = if variant == MaskVariant::Scalar {
            Tensor::scalar(s_value)
        } else {
            Tensor::full(vec![d], s_value)
        };
        let s = store.add(format!("{prefix}.s"), s_tensor);
        Self {
            layer_index,
            label,
            r,
            s,
            variant,
            complement: false,
        }
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        store.value(self.r).len()
    }

    pub fn r<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        store.value(self.r).data()
    }

    pub fn s<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        store.value(self.s).data()
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        store.is_frozen(self.r) && store.is_frozen(self.s)
    }

    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        store.set_frozen(self.r, frozen);
        store.set_frozen(self.s, frozen);
    }

    pub fn binary_mask(&self, store: &ParamStore) -> Vec<f64> {
        let q = binary_mask_values(self.variant, self.r(store), self.s(store));
        if self.complement {
            q.into_iter().map(|v| (1.0 - v).abs()).collect()
        } else {
            q
        }
    }

    pub fn filtering_vector(&self, store: &ParamStore) -> Vec<f64> {
        filtering_vector_values(self.variant, self.r(store), self.s(store), self.complement)
    }

    pub fn sparsity_loss(&self, store: &ParamStore) -> f64 {
        sparsity_loss_values(self.s(store), self.width(store))
    }

    pub fn sparsity_fraction(&self, store: &ParamStore) -> f64 {
        sparsity_fraction_values(&self.binary_mask(store))
    }

    /// `m` on the tape, with gradients reaching `r` and `s` through the
    /// variant's estimator.
    pub fn filtering_vector_var(&self, tape: &mut Tape, binder: &mut Binder) -> Result<Var> {
        let r = binder.bind(tape, self.r)?;
        let s = binder.bind(tape, self.s)?;
        match (self.variant, self.complement) {
            (MaskVariant::Str, false) => {
                let thr = tape.sigmoid(s)?;
                let a = tape.abs(r)?;
                let u = tape.sub(a, thr)?;
                let u = tape.relu(u)?;
                let sign: Vec<f64> = tape.value(r).data().iter().map(|v| v.signum()).collect();
                let sign = tape.constant(Tensor::vector(sign))?;
                tape.mul(u, sign)
            }
            (MaskVariant::Str, true) => {
                let q = self.binary_mask(binder.store());
                let q = tape.constant(Tensor::vector(q))?;
                tape.mul(r, q)
            }
            (variant, complement) => {
                let a = tape.abs(r)?;
                let t = tape.sub(a, s)?;
                let q = tape.unit_step(t, variant.estimator())?;
                let q = if complement { tape.affine(q, -1.0, 1.0)? } else { q };
                tape.mul(r, q)
            }
        }
    }

    /// `sum_i exp(-s_i)` on the tape.
    pub fn sparsity_loss_var(&self, tape: &mut Tape, binder: &mut Binder) -> Result<Var> {
        let d = self.width(binder.store());
        let s = binder.bind(tape, self.s)?;
        let neg = tape.scale(s, -1.0)?;
        let e = tape.exp(neg)?;
        let total = tape.sum(e)?;
        if self.variant == MaskVariant::Scalar && d != 1 {
            tape.scale(total, d as f64)
        } else {
            Ok(total)
        }
    }

    pub fn snapshot(&self, store: &ParamStore) -> MaskSnapshot {
        MaskSnapshot {
            layer_index: self.layer_index,
            label: self.label,
            r: self.r(store).to_vec(),
            s: self.s(store).to_vec(),
            q: self.binary_mask(store),
            m: self.filtering_vector(store),
            variant: self.variant,
            frozen: self.is_frozen(store),
        }
    }
}

/// `E = H * m`, row-broadcast over token positions.
pub fn apply_mask(tape: &mut Tape, states: Var, m: Var) -> Result<Var> {
    let (sh, sm) = (tape.shape(states).to_vec(), tape.shape(m).to_vec());
    if sm.len() != 1 || sh.last() != sm.last() {
        return Err(Error::Shape {
            op: "apply_mask",
            lhs: sh,
            rhs: sm,
        });
    }
    tape.mul(states, m)
}

/// Exported state of one mask layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSnapshot {
    pub layer_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    pub q: Vec<f64>,
    pub m: Vec<f64>,
    pub variant: MaskVariant,
    pub frozen: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layer(r: Vec<f64>, s: Vec<f64>, variant: MaskVariant) -> (ParamStore, FilterLayer) {
        let mut store = ParamStore::new();
        let ri = store.add("r", Tensor::vector(r));
        let s = if s.len() == 1 && variant == MaskVariant::Scalar {
            Tensor::scalar(s[0])
        } else {
            Tensor::vector(s)
        };
        let si = store.add("s", s);
        let f = FilterLayer {
            layer_index: 1,
            label: None,
            r: ri,
            s: si,
            variant,
            complement: false,
        };
        (store, f)
    }

    #[test]
    fn binary_mask_examples() {
        let (st, f) = layer(vec![0.5, -0.2, 0.1], vec![0.3; 3], MaskVariant::LongTailed);
        assert_eq!(f.binary_mask(&st), vec![1.0, 0.0, 0.0]);
        assert_eq!(f.filtering_vector(&st), vec![0.5, 0.0, 0.0]);
        let (st, f) = layer(vec![0.5, -0.2, 0.1], vec![-1.0; 3], MaskVariant::LongTailed);
        assert_eq!(f.binary_mask(&st), vec![1.0; 3]);
        assert_eq!(f.filtering_vector(&st), vec![0.5, -0.2, 0.1]);
        let (st, f) = layer(vec![0.0; 3], vec![0.0; 3], MaskVariant::LongTailed);
        assert_eq!(f.binary_mask(&st), vec![1.0; 3]);
    }

    #[test]
    fn str_filtering_vector() {
        // sigmoid(s) = 0.4 when s = ln(0.4 / 0.6)
        let s = (0.4f64 / 0.6).ln();
        let (st, f) = layer(vec![1.0], vec![s], MaskVariant::Str);
        let m = f.filtering_vector(&st);
        assert!((m[0] - 0.6).abs() < 1e-12, "{m:?}");
        let (st, f) = layer(vec![-0.3, 0.9], vec![s, s], MaskVariant::Str);
        assert_eq!(f.binary_mask(&st), vec![0.0, 1.0]);
    }

    #[test]
    fn apply_mask_examples() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let h = tape.reshape(h, vec![1, 3]).unwrap();
        let m = tape.constant(Tensor::vector(vec![0.5, 0.0, 2.0])).unwrap();
        let e = apply_mask(&mut tape, h, m).unwrap();
        assert_eq!(tape.value(e).data(), &[0.5, 0.0, 6.0]);

        let h2 = tape
            .constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let ones = tape.constant(Tensor::vector(vec![1.0; 3])).unwrap();
        let e2 = apply_mask(&mut tape, h2, ones).unwrap();
        assert_eq!(tape.value(e2).data(), tape.value(h2).data());
        let bad = tape.constant(Tensor::vector(vec![1.0; 2])).unwrap();
        assert!(matches!(apply_mask(&mut tape, h2, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_entries_zero_whole_columns() {
        let mut tape = Tape::new();
        let h = tape
            .constant(Tensor::matrix(3, 3, (1..=9).map(f64::from).collect()).unwrap())
            .unwrap();
        let m = tape.constant(Tensor::vector(vec![0.0, 1.5, 0.0])).unwrap();
        let e = apply_mask(&mut tape, h, m).unwrap();
        for row in 0..3 {
            let r = tape.value(e).row(row);
            assert_eq!(r[0], 0.0);
            assert_eq!(r[2], 0.0);
        }
    }

    #[test]
    fn sparsity_loss_examples() {
        assert_eq!(sparsity_loss_values(&[0.0, 0.0], 2), 2.0);
        assert!((sparsity_loss_values(&[2f64.ln()], 1) - 0.5).abs() < 1e-15);
        assert!((sparsity_loss_values(&[0.0], 5) - 5.0).abs() < 1e-15);

        let (st, f) = layer(vec![1.0, 1.0], vec![0.0, 0.0], MaskVariant::LongTailed);
        let mut tape = Tape::new();
        let mut b = Binder::new(&st, true);
        let l = f.sparsity_loss_var(&mut tape, &mut b).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        let s = b.bind(&mut tape, f.s).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[-1.0, -1.0]);
    }

    #[test]
    fn sparsity_fraction_examples() {
        assert!((sparsity_fraction_values(&[1.0, 0.0, 0.0]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(sparsity_fraction_values(&[1.0; 4]), 0.0);
    }

    #[test]
    fn tape_and_value_paths_agree() {
        for variant in [MaskVariant::LongTailed, MaskVariant::Ste, MaskVariant::Str] {
            for complement in [false, true] {
                let (st, mut f) = layer(vec![0.7, -0.05, 0.3, -0.9], vec![0.2, 0.1, 0.5, -0.3], variant);
                f.complement = complement;
                let mut tape = Tape::new();
                let mut b = Binder::new(&st, true);
                let m = f.filtering_vector_var(&mut tape, &mut b).unwrap();
                assert_eq!(tape.value(m).data(), f.filtering_vector(&st).as_slice());
            }
        }
    }

    #[test]
    fn surrogate_gradient_reaches_threshold() {
        // m = r * g(|r| - s); dm/ds = -r * g'(|r| - s)
        let (st, f) = layer(vec![0.5], vec![0.3], MaskVariant::LongTailed);
        let mut tape = Tape::new();
        let mut b = Binder::new(&st, true);
        let m = f.filtering_vector_var(&mut tape, &mut b).unwrap();
        let l = tape.sum(m).unwrap();
        let s = b.bind(&mut tape, f.s).unwrap();
        let r = b.bind(&mut tape, f.r).unwrap();
        tape.backward(l).unwrap();
        let t: f64 = 0.2;
        let factor = 2.0 - 4.0 * t;
        assert!((tape.grad(s).unwrap()[0] + 0.5 * factor).abs() < 1e-12);
        assert!((tape.grad(r).unwrap()[0] - (1.0 + 0.5 * factor)).abs() < 1e-12);
    }

    #[test]
    fn ste_backward_window() {
        let (st, f) = layer(vec![0.5, 3.0], vec![0.3, 0.3], MaskVariant::Ste);
        let mut tape = Tape::new();
        let mut b = Binder::new(&st, true);
        let m = f.filtering_vector_var(&mut tape, &mut b).unwrap();
        let l = tape.sum(m).unwrap();
        let s = b.bind(&mut tape, f.s).unwrap();
        tape.backward(l).unwrap();
        // factor 1 inside |t| <= 1, 0 outside (t = 2.7)
        assert_eq!(tape.grad(s).unwrap(), &[-0.5, 0.0]);
    }

    #[test]
    fn scalar_threshold_broadcasts() {
        let (st, f) = layer(vec![0.5, -0.2, 0.1], vec![0.3], MaskVariant::Scalar);
        assert_eq!(f.binary_mask(&st), vec![1.0, 0.0, 0.0]);
        assert!((f.sparsity_loss(&st) - 3.0 * (-0.3f64).exp()).abs() < 1e-15);
        let mut tape = Tape::new();
        let mut b = Binder::new(&st, true);
        let m = f.filtering_vector_var(&mut tape, &mut b).unwrap();
        assert_eq!(tape.value(m).data(), &[0.5, 0.0, 0.0]);
        let l = f.sparsity_loss_var(&mut tape, &mut b).unwrap();
        assert!((tape.value(l).item() - 3.0 * (-0.3f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn complement_is_an_involution() {
        let (st, f) = layer(vec![0.5, -0.2, 0.1, 0.9], vec![0.3; 4], MaskVariant::LongTailed);
        let q = f.binary_mask(&st);
        let once: Vec<f64> = q.iter().map(|v| (1.0 - v).abs()).collect();
        let twice: Vec<f64> = once.iter().map(|v| (1.0 - v).abs()).collect();
        assert_eq!(q, twice);
        let mut g = f.clone();
        g.complement = true;
        assert_eq!(g.binary_mask(&st), once);
    }

    proptest! {
        #[test]
        fn reconstruction_holds(r in proptest::collection::vec(-2.0f64..2.0, 1..12), sv in -1.0f64..1.0) {
            let s = vec![sv; r.len()];
            for variant in [MaskVariant::LongTailed, MaskVariant::Ste] {
                let q = binary_mask_values(variant, &r, &s);
                let m = filtering_vector_values(variant, &r, &s, false);
                for i in 0..r.len() {
                    prop_assert!(q[i] == 0.0 || q[i] == 1.0);
                    prop_assert_eq!(m[i], r[i] * q[i]);
                }
            }
        }

        #[test]
        fn raising_a_threshold_never_opens_a_gate(
            r in proptest::collection::vec(-2.0f64..2.0, 1..12),
            s in proptest::collection::vec(-1.0f64..1.0, 12),
            k in 0usize..12,
            bump in 0.0f64..3.0,
        ) {
            let s = &s[..r.len()];
            let k = k % r.len();
            let before = binary_mask_values(MaskVariant::LongTailed, &r, s);
            let mut raised = s.to_vec();
            raised[k] += bump;
            let after = binary_mask_values(MaskVariant::LongTailed, &r, &raised);
            prop_assert!(!(before[k] == 0.0 && after[k] == 1.0));
        }
    }
}
