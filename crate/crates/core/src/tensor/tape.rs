use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Backward rule used by the unit step node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepEstimator {
    /// Piecewise long-tailed estimator: `2 - 4|t|` near the origin, a flat
    /// `0.4` tail out to `|t| = 1`, zero beyond.
    LongTailed,
    /// Clipped straight-through: 1 on `|t| <= 1`, zero outside.
    Clipped,
    /// Almost-everywhere derivative of the step, i.e. zero. Used when
    /// comparing against finite differences.
    Exact,
}

impl StepEstimator {
    /// Multiplier applied to the upstream gradient at pre-activation `t`.
    pub fn factor(self, t: f64) -> f64 {
        let a = t.abs();
        match self {
            StepEstimator::LongTailed => {
                if a <= 0.4 {
                    2.0 - 4.0 * a
                } else if a <= 1.0 {
                    0.4
                } else {
                    0.0
                }
            }
            StepEstimator::Clipped => {
                if a <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            StepEstimator::Exact => 0.0,
        }
    }
}

/// Forward definition of the unit step: 1 for `t >= 0`, else 0.
pub fn unit_step_value(t: f64) -> f64 {
    if t >= 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine {
        x: usize,
        scale: f64,
    },
    Exp(usize),
    Log(usize),
    Relu(usize),
    Abs(usize),
    Sigmoid(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        widths: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    MeanRows(usize),
    Cosine {
        a: usize,
        b: usize,
        na: f64,
        nb: f64,
    },
    Step {
        x: usize,
        estimator: StepEstimator,
    },
    Pick {
        x: usize,
        index: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in execution order, so inputs always precede outputs
/// and a single reverse sweep visits every node once.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    step_override: Option<StepEstimator>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            step_override: None,
        }
    }

    /// Forces every later `unit_step` on this tape to use `estimator`.
    /// `StepEstimator::Exact` gives the true (zero) derivative, which is what
    /// a finite-difference check sees.
    pub fn set_step_estimator(&mut self, estimator: Option<StepEstimator>) {
        self.step_override = estimator;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage(format!("variable {:?} does not belong to tape {}", v, self.id)));
        }
        Ok(v.idx)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { op, value, requires_grad });
        self.backward_done = false;
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(Op::Leaf, value, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.idx].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Gradient accumulated for `v` by the last backward pass, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product. 1-D operands are treated as a row vector on the left
    /// and a column vector on the right; the corresponding axis is dropped
    /// from the output.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let sa = self.nodes[ia].value.shape().to_vec();
        let sb = self.nodes[ib].value.shape().to_vec();
        let (m, k) = match sa.len() {
            1 => (1, sa[0]),
            2 => (sa[0], sa[1]),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let (k2, n) = match sb.len() {
            1 => (sb[0], 1),
            2 => (sb[0], sb[1]),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let x = self.nodes[ia].value.data();
        let y = self.nodes[ib].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let xv = x[i * k + p];
                if xv == 0.0 {
                    continue;
                }
                let yrow = &y[p * n..(p + 1) * n];
                for (o, &yv) in orow.iter_mut().zip(yrow) {
                    *o += xv * yv;
                }
            }
        }
        let mut shape = Vec::new();
        if sa.len() == 2 {
            shape.push(m);
        }
        if sb.len() == 2 {
            shape.push(n);
        }
        let rg = self.rg(&[ia, ib]);
        self.push(Op::MatMul { a: ia, b: ib, m, k, n }, Tensor { shape, data: out }, rg, "matmul")
    }

    fn broadcast(&mut self, a: Var, b: Var, name: &'static str) -> Result<(usize, usize)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let sa = self.nodes[ia].value.shape();
        let sb = self.nodes[ib].value.shape();
        if is_suffix(sa, sb) {
            Ok((ia, ib))
        } else {
            Err(Error::Shape {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: impl Fn(usize, usize) -> Op) -> Result<Var> {
        // allow either operand to be the broadcast one
        let (ia, ib) = match self.broadcast(a, b, name) {
            Ok(p) => p,
            Err(e) => {
                let (ia, ib) = (self.check(a)?, self.check(b)?);
                if is_suffix(self.nodes[ib].value.shape(), self.nodes[ia].value.shape()) && name != "sub" {
                    (ib, ia)
                } else {
                    return Err(e);
                }
            }
        };
        let x = &self.nodes[ia].value;
        let y = self.nodes[ib].value.data();
        let nb = y.len();
        let data = x.data().iter().enumerate().map(|(i, &v)| f(v, y[i % nb])).collect();
        let value = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[ia, ib]);
        self.push(op(ia, ib), value, rg, name)
    }

    /// Elementwise sum; the smaller operand is broadcast over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    /// `a - b` with `b` broadcast over the leading axes of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with leading-axis broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.map_value(ix, |t| scale * t + shift);
        let rg = self.rg(&[ix]);
        self.push(Op::Affine { x: ix, scale }, v, rg, "affine")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    fn map_value(&self, ix: usize, f: impl Fn(f64) -> f64) -> Tensor {
        let x = &self.nodes[ix].value;
        Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|&v| f(v)).collect(),
        }
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.map_value(ix, f);
        let rg = self.rg(&[ix]);
        self.push(op(ix), v, rg, name)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", f64::exp, Op::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "log", f64::ln, Op::Log)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "abs", f64::abs, Op::Abs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid)
    }

    fn last_axis_nonempty(&self, ix: usize, name: &'static str) -> Result<usize> {
        let s = self.nodes[ix].value.shape();
        match s.last() {
            Some(&c) if c > 0 => Ok(c),
            _ => Err(Error::Shape {
                op: name,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let c = self.last_axis_nonempty(ix, "softmax")?;
        let xv = &self.nodes[ix].value;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[ix]);
        self.push(Op::Softmax(ix), value, rg, "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let c = self.last_axis_nonempty(ix, "log_softmax")?;
        let xv = &self.nodes[ix].value;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[ix]);
        self.push(Op::LogSoftmax(ix), value, rg, "log_softmax")
    }

    /// Layer normalization over the last axis with population variance and
    /// learnable `gamma`/`beta` of the last-axis width.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let c = self.last_axis_nonempty(ix, "layernorm")?;
        for &p in &[ig, ib] {
            if self.nodes[p].value.shape() != [c] {
                return Err(Error::Shape {
                    op: "layernorm",
                    lhs: self.nodes[ix].value.shape().to_vec(),
                    rhs: self.nodes[p].value.shape().to_vec(),
                });
            }
        }
        let xv = &self.nodes[ix].value;
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(&[ix, ig, ib]);
        self.push(
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            value,
            rg,
            "layernorm",
        )
    }

    /// Row lookup into a `[rows, width]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let tv = &self.nodes[it].value;
        if tv.rank() != 2 {
            return Err(Error::Shape {
                op: "gather",
                lhs: tv.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, w) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::input(format!("index {bad} out of range for table with {rows} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor {
            shape: vec![ids.len(), w],
            data,
        };
        let rg = self.rg(&[it]);
        self.push(
            Op::Gather {
                table: it,
                ids: ids.to_vec(),
            },
            value,
            rg,
            "gather",
        )
    }

    /// Concatenation along the last axis. Scalars count as width-1 vectors;
    /// all inputs must agree on their leading shape.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::input("concat of zero tensors"));
        }
        let ids = xs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let lead = |s: &[usize]| -> Vec<usize> {
            if s.is_empty() {
                Vec::new()
            } else {
                s[..s.len() - 1].to_vec()
            }
        };
        let first = lead(self.nodes[ids[0]].value.shape());
        let mut widths = Vec::with_capacity(ids.len());
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            if lead(s) != first {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.nodes[ids[0]].value.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(self.nodes[i].value.last_dim());
        }
        let rows: usize = first.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in ids.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first;
        shape.push(total);
        let rg = self.rg(&ids);
        self.push(Op::Concat { inputs: ids, widths }, Tensor { shape, data }, rg, "concat")
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        let c = xv.last_dim();
        if xv.rank() == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = xv.len() / c;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[ix]);
        self.push(Op::SliceCols { x: ix, start, len }, Tensor { shape, data }, rg, "slice_cols")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        if xv.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv.data()[i * c + j];
            }
        }
        let rg = self.rg(&[ix]);
        self.push(Op::Transpose(ix), Tensor { shape: vec![c, r], data }, rg, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        if shape.iter().product::<usize>() != xv.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: xv.shape().to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor {
            shape,
            data: xv.data().to_vec(),
        };
        let rg = self.rg(&[ix]);
        self.push(Op::Reshape(ix), value, rg, "reshape")
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().sum();
        let rg = self.rg(&[ix]);
        self.push(Op::Sum(ix), Tensor::scalar(s), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        if xv.is_empty() {
            return Err(Error::input("mean of empty tensor"));
        }
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(&[ix]);
        self.push(Op::Mean(ix), Tensor::scalar(s), rg, "mean")
    }

    fn rows_reduce(&mut self, x: Var, mean: bool) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        if xv.rank() != 2 || xv.shape()[0] == 0 {
            return Err(Error::Shape {
                op: "sum_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        if mean {
            out.iter_mut().for_each(|o| *o /= r as f64);
        }
        let rg = self.rg(&[ix]);
        let op = if mean { Op::MeanRows(ix) } else { Op::SumRows(ix) };
        self.push(op, Tensor::vector(out), rg, "sum_rows")
    }

    /// Sum over the first axis of a matrix.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        self.rows_reduce(x, false)
    }

    /// Mean over the first axis of a matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.rows_reduce(x, true)
    }

    /// Cosine similarity of two equal-length vectors. A zero-norm operand
    /// yields 0 with zero gradient.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.rank() != 1 || x.shape() != y.shape() {
            return Err(Error::Shape {
                op: "cosine",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let na = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let c = if na == 0.0 || nb == 0.0 {
            log::warn!("cosine similarity with a zero-norm vector; reporting 0");
            0.0
        } else {
            x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>() / (na * nb)
        };
        let rg = self.rg(&[ia, ib]);
        self.push(Op::Cosine { a: ia, b: ib, na, nb }, Tensor::scalar(c), rg, "cosine")
    }

    /// Unit step `g(t)`; the backward pass uses `estimator` in place of the
    /// (zero almost everywhere) true derivative.
    pub fn unit_step(&mut self, x: Var, estimator: StepEstimator) -> Result<Var> {
        let ix = self.check(x)?;
        let v = self.map_value(ix, unit_step_value);
        let rg = self.rg(&[ix]);
        let estimator = self.step_override.unwrap_or(estimator);
        self.push(Op::Step { x: ix, estimator }, v, rg, "unit_step")
    }

    /// Single element by flat index, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let xv = &self.nodes[ix].value;
        if index >= xv.len() {
            return Err(Error::input(format!("pick index {index} out of range {}", xv.len())));
        }
        let v = Tensor::scalar(xv.data()[index]);
        let rg = self.rg(&[ix]);
        self.push(Op::Pick { x: ix, index }, v, rg, "pick")
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of every node that
    /// requires them are then available through [`Tape::grad`].
    ///
    /// A second call without recording new nodes is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.nodes[il].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[il].requires_grad {
            return Ok(());
        }
        self.grads[il] = Some(vec![1.0]);

        for idx in (0..=il).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                self.grads[idx] = Some(g);
                continue;
            }
            backprop(&self.nodes, &mut self.grads, idx, &g);
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    let out = &nodes[idx].value;
    match &nodes[idx].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            let (x, y) = (nodes[a].value.data(), nodes[b].value.data());
            accumulate(nodes, grads, a, |ga| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let yrow = &y[p * n..(p + 1) * n];
                        ga[i * k + p] += grow.iter().zip(yrow).map(|(u, v)| u * v).sum::<f64>();
                    }
                }
            });
            accumulate(nodes, grads, b, |gb| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let xv = x[i * k + p];
                        if xv == 0.0 {
                            continue;
                        }
                        for (o, &u) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += xv * u;
                        }
                    }
                }
            });
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, |ga| ga.iter_mut().zip(g).for_each(|(o, u)| *o += u));
            accumulate(nodes, grads, b, |gb| {
                let nb = gb.len();
                g.iter().enumerate().for_each(|(i, u)| gb[i % nb] += u)
            });
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, |ga| ga.iter_mut().zip(g).for_each(|(o, u)| *o += u));
            accumulate(nodes, grads, b, |gb| {
                let nb = gb.len();
                g.iter().enumerate().for_each(|(i, u)| gb[i % nb] -= u)
            });
        }
        &Op::Mul(a, b) => {
            let (x, y) = (nodes[a].value.data(), nodes[b].value.data());
            let nb = y.len();
            accumulate(nodes, grads, a, |ga| g.iter().enumerate().for_each(|(i, u)| ga[i] += u * y[i % nb]));
            accumulate(nodes, grads, b, |gb| g.iter().enumerate().for_each(|(i, u)| gb[i % nb] += u * x[i]));
        }
        &Op::Affine { x, scale } => {
            accumulate(nodes, grads, x, |gx| gx.iter_mut().zip(g).for_each(|(o, u)| *o += scale * u));
        }
        &Op::Exp(x) => {
            let y = out.data();
            accumulate(nodes, grads, x, |gx| {
                gx.iter_mut().zip(g.iter().zip(y)).for_each(|(o, (u, v))| *o += u * v)
            });
        }
        &Op::Log(x) => {
            let xv = nodes[x].value.data();
            accumulate(nodes, grads, x, |gx| {
                gx.iter_mut().zip(g.iter().zip(xv)).for_each(|(o, (u, v))| *o += u / v)
            });
        }
        &Op::Relu(x) => {
            let xv = nodes[x].value.data();
            accumulate(nodes, grads, x, |gx| {
                gx.iter_mut().zip(g.iter().zip(xv)).for_each(|(o, (u, v))| {
                    if *v > 0.0 {
                        *o += u
                    }
                })
            });
        }
        &Op::Abs(x) => {
            let xv = nodes[x].value.data();
            accumulate(nodes, grads, x, |gx| {
                gx.iter_mut().zip(g.iter().zip(xv)).for_each(|(o, (u, v))| {
                    if *v > 0.0 {
                        *o += u
                    } else if *v < 0.0 {
                        *o -= u
                    }
                })
            });
        }
        &Op::Sigmoid(x) => {
            let y = out.data();
            accumulate(nodes, grads, x, |gx| {
                gx.iter_mut().zip(g.iter().zip(y)).for_each(|(o, (u, s))| *o += u * s * (1.0 - s))
            });
        }
        &Op::Softmax(x) => {
            let y = out.data();
            let c = out.last_dim();
            accumulate(nodes, grads, x, |gx| {
                for r in 0..y.len() / c {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        &Op::LogSoftmax(x) => {
            let y = out.data();
            let c = out.last_dim();
            accumulate(nodes, grads, x, |gx| {
                for r in 0..y.len() / c {
                    let gr = &g[r * c..(r + 1) * c];
                    let gs: f64 = gr.iter().sum();
                    for j in 0..c {
                        gx[r * c + j] += gr[j] - y[r * c + j].exp() * gs;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let c = out.last_dim();
            let gam = nodes[gamma].value.data();
            accumulate(nodes, grads, gamma, |gg| {
                for (i, u) in g.iter().enumerate() {
                    gg[i % c] += u * xhat[i];
                }
            });
            accumulate(nodes, grads, beta, |gb| {
                for (i, u) in g.iter().enumerate() {
                    gb[i % c] += u;
                }
            });
            accumulate(nodes, grads, x, |gx| {
                for (r, rs) in rstd.iter().enumerate() {
                    let base = r * c;
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        let dh = g[base + j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[base + j];
                    }
                    let inv_c = 1.0 / c as f64;
                    for j in 0..c {
                        let dh = g[base + j] * gam[j];
                        gx[base + j] += rs * (dh - inv_c * sum_dh - xhat[base + j] * inv_c * sum_dh_h);
                    }
                }
            });
        }
        Op::Gather { table, ids } => {
            let w = out.last_dim();
            accumulate(nodes, grads, *table, |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..w {
                        gt[id * w + j] += g[r * w + j];
                    }
                }
            });
        }
        Op::Concat { inputs, widths } => {
            let total: usize = widths.iter().sum();
            let rows = out.len() / total;
            let mut offset = 0;
            for (&i, &w) in inputs.iter().zip(widths) {
                accumulate(nodes, grads, i, |gi| {
                    for r in 0..rows {
                        for j in 0..w {
                            gi[r * w + j] += g[r * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        &Op::SliceCols { x, start, len } => {
            let c = nodes[x].value.last_dim();
            let rows = out.len() / len.max(1);
            accumulate(nodes, grads, x, |gx| {
                for r in 0..rows {
                    for j in 0..len {
                        gx[r * c + start + j] += g[r * len + j];
                    }
                }
            });
        }
        &Op::Transpose(x) => {
            let (r, c) = (nodes[x].value.shape()[0], nodes[x].value.shape()[1]);
            accumulate(nodes, grads, x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        &Op::Reshape(x) => {
            accumulate(nodes, grads, x, |gx| gx.iter_mut().zip(g).for_each(|(o, u)| *o += u));
        }
        &Op::Sum(x) => {
            accumulate(nodes, grads, x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
        }
        &Op::Mean(x) => {
            let n = nodes[x].value.len() as f64;
            accumulate(nodes, grads, x, |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
        }
        &Op::SumRows(x) | &Op::MeanRows(x) => {
            let r = nodes[x].value.shape()[0];
            let c = g.len();
            let f = if matches!(nodes[idx].op, Op::MeanRows(_)) {
                1.0 / r as f64
            } else {
                1.0
            };
            accumulate(nodes, grads, x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += f * g[j];
                    }
                }
            });
        }
        &Op::Cosine { a, b, na, nb } => {
            if na == 0.0 || nb == 0.0 {
                return;
            }
            let cos = out.item();
            let (x, y) = (nodes[a].value.data(), nodes[b].value.data());
            accumulate(nodes, grads, a, |ga| {
                for i in 0..x.len() {
                    ga[i] += g[0] * (y[i] / (na * nb) - cos * x[i] / (na * na));
                }
            });
            accumulate(nodes, grads, b, |gb| {
                for i in 0..y.len() {
                    gb[i] += g[0] * (x[i] / (na * nb) - cos * y[i] / (nb * nb));
                }
            });
        }
        &Op::Step { x, estimator } => {
            let xv = nodes[x].value.data();
            accumulate(nodes, grads, x, |gx| {
                gx.iter_mut()
                    .zip(g.iter().zip(xv))
                    .for_each(|(o, (u, t))| *o += u * estimator.factor(*t))
            });
        }
        &Op::Pick { x, index } => {
            accumulate(nodes, grads, x, |gx| gx[index] += g[0]);
        }
    }
}
