//! Adam with bias correction and a warmup-then-linear-decay schedule.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// One Adam update of `param` in place; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, betas: (f64, f64), eps: f64) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

pub const EPS: f64 = 1e-8;

/// Optimizer state for the parameters of one training stage.
#[derive(Clone, Debug)]
pub struct Adam {
    betas: (f64, f64),
    eps: f64,
    t: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(betas: (f64, f64)) -> Self {
        Self {
            betas,
            eps: EPS,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Non-finite gradients leave everything untouched
    /// and return a `NonFinite` error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) -> Result<()> {
        if grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("gradient"));
        }
        self.t += 1;
        for (id, g) in grads {
            if self.moments.len() <= id.0 {
                self.moments.resize(id.0 + 1, None);
            }
            let (m, v) = self.moments[id.0].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let p = store.value_mut(*id).data_mut();
            adam_update(p, g, m, v, self.t, lr, self.betas, self.eps);
        }
        Ok(())
    }
}

/// Learning rate at 0-based `step`: linear warmup over the first
/// `floor(warmup_fraction * total)` steps, then linear decay toward zero.
pub fn lr_at(base: f64, step: usize, total: usize, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * total as f64).floor() as usize;
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        let rest = total.saturating_sub(warmup).max(1);
        base * total.saturating_sub(step) as f64 / rest as f64
    }
}
