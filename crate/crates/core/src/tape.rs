//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! gradients for every node and every parameter that took part.
//!
//! Besides elementwise and matrix primitives the tape has fused operations for
//! block-structured attention and the row-wise losses used by the grounding
//! model, each with a hand-written adjoint.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    StackSteps(Vec<Var>),
    Reshape(Var),
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        lq: usize,
        lk: usize,
        scale: f64,
        probs: Vec<Mat>,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    SoftCrossEntropyRows {
        logits: Var,
        targets: Mat,
        probs: Mat,
    },
    MaskedLogSumExp {
        x: Var,
        weights: Mat,
    },
    RowMaskedLogSumExp {
        x: Var,
        weights: Mat,
    },
    BlockMax {
        x: Var,
        block: usize,
        argmax: Vec<usize>,
    },
    Sum(Var),
    WeightedSum(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: HashMap<ParamId, Mat>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if the node influenced it.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Mat> {
        &self.params
    }

    pub fn into_params(self) -> HashMap<ParamId, Mat> {
        self.params
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

fn softmax_rows(x: ArrayView2<'_, f64>) -> Mat {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Same as [`Tape::leaf`]; used where the value is a fixed target or a
    /// detached copy of another node.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(shape_err("matmul_t", av.shape(), bv.shape()));
        }
        let out = av.dot(&bv.t());
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != xv.ncols() {
            return Err(shape_err("add_row", xv.shape(), rv.shape()));
        }
        let out = xv + rv;
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// Multiplies every row of `x` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != xv.ncols() {
            return Err(shape_err("mul_row", xv.shape(), rv.shape()));
        }
        let out = xv * rv;
        Ok(self.push(out, Op::MulRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x) * c;
        self.push(out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(x))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { x, norms })
    }

    /// Per-row standardisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.nrows()) {
            return Err(Error::OutOfRange(format!(
                "gather row {bad} of {}",
                xv.nrows()
            )));
        }
        let out = xv.select(Axis(0), rows);
        Ok(self.push(out, Op::GatherRows(x, rows.to_vec())))
    }

    /// Interleaves `T` matrices of shape `B x d` into one `(B*T) x d` matrix
    /// where row `b*T + t` is row `b` of step `t`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = steps.first().ok_or(Error::Empty("stack_steps"))?;
        let (b, d) = self.value(*first).dim();
        let t = steps.len();
        let mut out = Mat::zeros((b * t, d));
        for (ti, step) in steps.iter().enumerate() {
            let sv = self.value(*step);
            if sv.dim() != (b, d) {
                return Err(shape_err("stack_steps", &[b, d], sv.shape()));
            }
            for bi in 0..b {
                out.row_mut(bi * t + ti).assign(&sv.row(bi));
            }
        }
        Ok(self.push(out, Op::StackSteps(steps.to_vec())))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != rows * cols {
            return Err(shape_err("reshape", xv.shape(), &[rows, cols]));
        }
        let flat: Vec<f64> = xv.iter().copied().collect();
        let out = Mat::from_shape_vec((rows, cols), flat).expect("length checked");
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Scaled dot-product attention applied independently to aligned blocks:
    /// block `b` uses query rows `[b*lq, (b+1)*lq)` and key/value rows
    /// `[b*lk, (b+1)*lk)`.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        lq: usize,
        lk: usize,
        scale: f64,
    ) -> Result<Var> {
        self.attention(q, k, v, lq, lk, scale, false)
    }

    /// Like [`Tape::block_attention`] with `lq == lk`, but row `i` of a block
    /// only attends to rows `0..=i`.
    pub fn causal_block_attention(&mut self, q: Var, k: Var, v: Var, len: usize, scale: f64) -> Result<Var> {
        self.attention(q, k, v, len, len, scale, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        lq: usize,
        lk: usize,
        scale: f64,
        causal: bool,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if lq == 0 || lk == 0 || qv.nrows() % lq != 0 {
            return Err(Error::Shape(format!(
                "attention block sizes lq={lq} lk={lk} for {} query rows",
                qv.nrows()
            )));
        }
        let blocks = qv.nrows() / lq;
        if kv.nrows() != blocks * lk || vv.nrows() != kv.nrows() || qv.ncols() != kv.ncols() {
            return Err(Error::Shape(format!(
                "attention q {:?} k {:?} v {:?} with lq={lq} lk={lk}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let mut out = Mat::zeros((qv.nrows(), vv.ncols()));
        let mut probs = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let qb = qv.slice(s![b * lq..(b + 1) * lq, ..]);
            let kb = kv.slice(s![b * lk..(b + 1) * lk, ..]);
            let vb = vv.slice(s![b * lk..(b + 1) * lk, ..]);
            let mut scores = qb.dot(&kb.t()) * scale;
            if causal {
                for i in 0..lq {
                    for j in i + 1..lk {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
            }
            let p = softmax_rows(scores.view());
            out.slice_mut(s![b * lq..(b + 1) * lq, ..]).assign(&p.dot(&vb));
            probs.push(p);
        }
        Ok(self.push(
            out,
            Op::BlockAttention {
                q,
                k,
                v,
                lq,
                lk,
                scale,
                probs,
            },
        ))
    }

    /// Per-row `-log softmax(logits)[target]`, returned as an `n x 1` column.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.nrows() != targets.len() {
            return Err(shape_err("cross_entropy_rows", lv.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.ncols()) {
            return Err(Error::OutOfRange(format!(
                "target {bad} with {} classes",
                lv.ncols()
            )));
        }
        let probs = softmax_rows(lv.view());
        let mut out = Mat::zeros((lv.nrows(), 1));
        for (i, row) in lv.rows().into_iter().enumerate() {
            out[[i, 0]] = log_sum_exp(row.iter().copied()) - row[targets[i]];
        }
        Ok(self.push(
            out,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Per-row `-Σ_j target_ij log softmax(logits)_ij`, as an `n x 1` column.
    pub fn soft_cross_entropy_rows(&mut self, logits: Var, targets: Mat) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(shape_err("soft_cross_entropy_rows", lv.shape(), targets.shape()));
        }
        let probs = softmax_rows(lv.view());
        let mut out = Mat::zeros((lv.nrows(), 1));
        for (i, row) in lv.rows().into_iter().enumerate() {
            let lse = log_sum_exp(row.iter().copied());
            out[[i, 0]] = row
                .iter()
                .zip(targets.row(i))
                .map(|(x, t)| t * (lse - x))
                .sum::<f64>();
        }
        Ok(self.push(
            out,
            Op::SoftCrossEntropyRows {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// `log Σ exp(x)` over the entries where `mask` is true, as a `1 x 1` node.
    pub fn masked_log_sum_exp(&mut self, x: Var, mask: &Array2<bool>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(shape_err("masked_log_sum_exp", xv.shape(), mask.shape()));
        }
        let picked = || xv.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(v, _)| *v);
        let lse = log_sum_exp(picked());
        if !lse.is_finite() {
            return Err(Error::Empty("masked_log_sum_exp selection"));
        }
        let mut weights = Mat::zeros(xv.raw_dim());
        Zip::from(&mut weights)
            .and(xv)
            .and(mask)
            .for_each(|w, &v, &m| {
                if m {
                    *w = (v - lse).exp();
                }
            });
        Ok(self.push(
            Mat::from_elem((1, 1), lse),
            Op::MaskedLogSumExp { x, weights },
        ))
    }

    /// Row-wise masked log-sum-exp, as an `n x 1` column. Every row must
    /// select at least one entry.
    pub fn row_masked_log_sum_exp(&mut self, x: Var, mask: &Array2<bool>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(shape_err("row_masked_log_sum_exp", xv.shape(), mask.shape()));
        }
        let mut out = Mat::zeros((xv.nrows(), 1));
        let mut weights = Mat::zeros(xv.raw_dim());
        for i in 0..xv.nrows() {
            let row = xv.row(i);
            let mrow = mask.row(i);
            let lse = log_sum_exp(row.iter().zip(mrow.iter()).filter(|(_, &m)| m).map(|(v, _)| *v));
            if !lse.is_finite() {
                return Err(Error::Empty("row_masked_log_sum_exp row selection"));
            }
            out[[i, 0]] = lse;
            for j in 0..row.len() {
                if mrow[j] {
                    weights[[i, j]] = (row[j] - lse).exp();
                }
            }
        }
        Ok(self.push(out, Op::RowMaskedLogSumExp { x, weights }))
    }

    /// Row-wise maximum over consecutive column blocks of width `block`.
    pub fn block_max(&mut self, x: Var, block: usize) -> Result<Var> {
        let xv = self.value(x);
        if block == 0 || xv.ncols() % block != 0 {
            return Err(Error::Shape(format!(
                "block_max width {block} for {} columns",
                xv.ncols()
            )));
        }
        let nb = xv.ncols() / block;
        let mut out = Mat::zeros((xv.nrows(), nb));
        let mut argmax = Vec::with_capacity(xv.nrows() * nb);
        for i in 0..xv.nrows() {
            for b in 0..nb {
                let mut best = b * block;
                for j in b * block..(b + 1) * block {
                    if xv[[i, j]] > xv[[i, best]] {
                        best = j;
                    }
                }
                out[[i, b]] = xv[[i, best]];
                argmax.push(best);
            }
        }
        Ok(self.push(out, Op::BlockMax { x, block, argmax }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Mat::from_elem((1, 1), total), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ w ∘ x` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Mat) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(shape_err("weighted_sum", xv.shape(), weights.shape()));
        }
        let total = (xv * &weights).sum();
        Ok(self.push(Mat::from_elem((1, 1), total), Op::WeightedSum(x, weights)))
    }

    /// Backpropagates from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(shape_err("backward", self.value(loss).shape(), &[1, 1]));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, g.clone());
                }
                Op::MulRow(x, row) => {
                    let gr = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, &g * self.value(*row));
                }
                Op::Scale(x, c) => acc(&mut grads, *x, &g * *c),
                Op::Relu(x) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gv, &xv| {
                            if xv <= 0.0 {
                                *gv = 0.0;
                            }
                        });
                    acc(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = &g * &node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *x, gx);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let proj = g.row(r).dot(&y.row(r));
                        for c in 0..y.ncols() {
                            gx[[r, c]] = (g[[r, c]] - y[[r, c]] * proj) / norms[r];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = &g * &node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut gx = Mat::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gy.sum() / n;
                        let mean_gy = gy.dot(&yr) / n;
                        let mut out = gx.row_mut(r);
                        for c in 0..y.ncols() {
                            out[c] = inv_std[r] * (gy[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::GatherRows(x, rows) => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    for (out_row, &src) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(src);
                        dst += &g.row(out_row);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::StackSteps(steps) => {
                    let t = steps.len();
                    for (ti, step) in steps.iter().enumerate() {
                        let (b, d) = self.value(*step).dim();
                        let mut gs = Mat::zeros((b, d));
                        for bi in 0..b {
                            gs.row_mut(bi).assign(&g.row(bi * t + ti));
                        }
                        acc(&mut grads, *step, gs);
                    }
                }
                Op::Reshape(x) => {
                    let dim = self.value(*x).raw_dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let gx = Mat::from_shape_vec(dim, flat).expect("same length");
                    acc(&mut grads, *x, gx);
                }
                Op::BlockAttention {
                    q,
                    k,
                    v,
                    lq,
                    lk,
                    scale,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut gq = Mat::zeros(qv.raw_dim());
                    let mut gk = Mat::zeros(kv.raw_dim());
                    let mut gv = Mat::zeros(vv.raw_dim());
                    for (b, p) in probs.iter().enumerate() {
                        let (qr, kr) = (b * lq..(b + 1) * lq, b * lk..(b + 1) * lk);
                        let go = g.slice(s![qr.clone(), ..]);
                        let vb = vv.slice(s![kr.clone(), ..]);
                        gv.slice_mut(s![kr.clone(), ..]).assign(&p.t().dot(&go));
                        let gp = go.dot(&vb.t());
                        let row_dot = (&gp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                        let gs = p * &(&gp - &row_dot) * *scale;
                        gq.slice_mut(s![qr.clone(), ..])
                            .assign(&gs.dot(&kv.slice(s![kr.clone(), ..])));
                        gk.slice_mut(s![kr, ..]).assign(&gs.t().dot(&qv.slice(s![qr, ..])));
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::CrossEntropyRows {
                    logits,
                    targets,
                    probs,
                } => {
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[[r, t]] -= 1.0;
                        let gr = g[[r, 0]];
                        gl.row_mut(r).mapv_inplace(|v| v * gr);
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::SoftCrossEntropyRows {
                    logits,
                    targets,
                    probs,
                } => {
                    let mut gl = Mat::zeros(probs.raw_dim());
                    for r in 0..probs.nrows() {
                        let mass = targets.row(r).sum();
                        let gr = g[[r, 0]];
                        for c in 0..probs.ncols() {
                            gl[[r, c]] = gr * (probs[[r, c]] * mass - targets[[r, c]]);
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::MaskedLogSumExp { x, weights } => {
                    acc(&mut grads, *x, weights * g[[0, 0]]);
                }
                Op::RowMaskedLogSumExp { x, weights } => {
                    acc(&mut grads, *x, weights * &g);
                }
                Op::BlockMax { x, block, argmax } => {
                    let xv = self.value(*x);
                    let nb = xv.ncols() / block;
                    let mut gx = Mat::zeros(xv.raw_dim());
                    for r in 0..xv.nrows() {
                        for b in 0..nb {
                            gx[[r, argmax[r * nb + b]]] += g[[r, b]];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Mat::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *x, gx);
                }
                Op::WeightedSum(x, w) => acc(&mut grads, *x, w * g[[0, 0]]),
            }
            grads[i] = Some(g);
        }

        let mut params = HashMap::new();
        for (&pid, &var) in &self.param_nodes {
            if let Some(g) = &grads[var.0] {
                params.insert(pid, g.clone());
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_gradient_closed_form() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = t.leaf(array![[0.5, -1.0], [2.0, 0.25]]);
        let c = t.matmul(a, b).unwrap();
        let loss = t.sum(c);
        let g = t.backward(loss).unwrap();
        // d/dA sum(AB) = 1 Bᵀ
        assert_eq!(g.wrt(a).unwrap(), &array![[-0.5, 2.25], [-0.5, 2.25]]);
        assert_eq!(g.wrt(b).unwrap(), &array![[4.0, 4.0], [6.0, 6.0]]);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(array![[3.0]]);
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.wrt(x).unwrap()[[0, 0]], 7.0);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::zeros((2, 3)));
        let b = t.leaf(Mat::zeros((2, 3)));
        assert!(t.matmul(a, b).is_err());
        assert!(t.gather_rows(a, &[5]).is_err());
        assert!(t.backward(a).is_err());
        assert!(t.cross_entropy_rows(a, &[0, 3]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let mut t = Tape::new();
        let l = t.leaf(Mat::zeros((1, 4)));
        let ce = t.cross_entropy_rows(l, &[2]).unwrap();
        assert!((t.value(ce)[[0, 0]] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn stack_steps_layout() {
        let mut t = Tape::new();
        let s0 = t.leaf(array![[1.0], [2.0]]);
        let s1 = t.leaf(array![[10.0], [20.0]]);
        let st = t.stack_steps(&[s0, s1]).unwrap();
        assert_eq!(t.value(st), &array![[1.0], [10.0], [2.0], [20.0]]);
    }

    #[test]
    fn masked_lse_rejects_empty_selection() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::zeros((2, 2)));
        let mask = Array2::from_elem((2, 2), false);
        assert!(t.masked_log_sum_exp(x, &mask).is_err());
    }
}
