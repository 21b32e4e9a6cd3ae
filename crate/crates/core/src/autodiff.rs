//! Reverse-mode automatic differentiation over [`Tensor2`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and the handles of its inputs. [`Graph::backward`] walks the tape in
//! reverse and accumulates vector-Jacobian products. Parameters are leaves
//! tagged with a [`ParamId`]; every registered parameter gets a gradient,
//! exactly zero when it did not reach the loss.

use std::collections::BTreeMap;

use crate::error::{CcdError, Result};
use crate::tensor::Tensor2;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable tensor across graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    NormalizeRows(Var, Vec<f64>),
    MaskedLogSoftmax(Var, Vec<bool>),
    WeightedSum(Var, Tensor2),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Norms below this are treated as this value when normalizing rows.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor2>>,
    params: BTreeMap<ParamId, Tensor2>,
}

impl Gradients {
    /// Gradient of a registered parameter. `None` only if `id` was never
    /// registered on the graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor2> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor2> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor2> {
        self.params
    }

    /// Gradient with respect to any node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor2> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                rg(a) || rg(b)
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Exp(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::NormalizeRows(a, _)
            | Op::MaskedLogSoftmax(a, _)
            | Op::WeightedSum(a, _) => rg(a),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(rg),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; receives no gradient bookkeeping.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor2) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: Some(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s value with no path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    /// Adds the `1 x n` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor2::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor2> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor2::concat_cols(&values)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, end)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor2> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor2::concat_rows(&values)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let out = self.value(a).gather_rows(index)?;
        Ok(self.push(out, Op::GatherRows(a, index.to_vec())))
    }

    /// Scales each row to unit L2 norm (norms floored at [`NORM_FLOOR`]).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms.push(n);
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        self.push(out, Op::NormalizeRows(a, norms))
    }

    /// Row-wise log-softmax over the entries where `mask` is true.
    ///
    /// Masked-out entries are set to 0 and carry no gradient; a row with no
    /// retained entry is all zeros.
    pub fn masked_log_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(CcdError::contract(format!(
                "mask length {} does not match logits shape {:?}",
                mask.len(),
                x.shape()
            )));
        }
        let cols = x.cols();
        let mut out = Tensor2::zeros(x.rows(), cols);
        for r in 0..x.rows() {
            let row = x.row(r);
            let m = &mask[r * cols..(r + 1) * cols];
            let lse = masked_logsumexp(row, m);
            let Some(lse) = lse else { continue };
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                if m[c] {
                    *o = row[c] - lse;
                }
            }
        }
        Ok(self.push(out, Op::MaskedLogSoftmax(a, mask.to_vec())))
    }

    /// `Σ weights ⊙ a` as a 1x1 tensor.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor2) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != weights.shape() {
            return Err(CcdError::dim("weighted_sum", x.shape(), weights.shape()));
        }
        let s = x.data().iter().zip(weights.data()).map(|(v, w)| v * w).sum();
        Ok(self.push(Tensor2::scalar(s), Op::WeightedSum(a, weights)))
    }

    /// One bit per piecewise-linear branch taken in the forward pass (relu
    /// sign, clamp saturation, norm floor). Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => sig.extend(self.value(*a).data().iter().map(|&v| v > 0.0)),
                Op::Clamp(a, lo, hi) => sig.extend(self.value(*a).data().iter().map(|&v| v > *lo && v < *hi)),
                Op::NormalizeRows(_, norms) => sig.extend(norms.iter().map(|&n| n > NORM_FLOOR)),
                _ => {}
            }
        }
        sig
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(CcdError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor2::zeros(node.value.rows(), node.value.cols()));
                match params.get_mut(&id) {
                    None => {
                        params.insert(id, g);
                    }
                    Some(acc) => {
                        let acc: &mut Tensor2 = acc;
                        acc.add_assign(&g);
                    }
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>]) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.matmul_t(self.value(*b))?);
                }
                if rg(*b) {
                    accumulate(grads, *b, self.value(*a).t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                // out = A Bᵀ: dA = G B, dB = Gᵀ A
                if rg(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if rg(*b) {
                    accumulate(grads, *b, g.t_matmul(self.value(*a))?);
                }
            }
            Op::AddRow(x, bias) => {
                if rg(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if rg(*bias) {
                    accumulate(grads, *bias, g.sum_rows());
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.hadamard(self.value(*b))?);
                }
                if rg(*b) {
                    accumulate(grads, *b, g.hadamard(self.value(*a))?);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = zip_map(g, x, |g, x| if x > 0.0 { g } else { 0.0 });
                accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let d = zip_map(g, x, |g, x| if x > 0.0 { g } else { slope * g });
                accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                accumulate(grads, *a, g.hadamard(&node.value)?);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let d = zip_map(g, x, |g, x| if x > *lo && x < *hi { g } else { 0.0 });
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, Tensor2::filled(r, c, g.data()[0]));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if rg(p) {
                        accumulate(grads, p, g.slice_cols(start, start + w)?);
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor2::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if rg(p) {
                        let slice = g.data()[start * c..(start + r) * c].to_vec();
                        accumulate(grads, p, Tensor2::from_vec(r, c, slice)?);
                    }
                    start += r;
                }
            }
            Op::GatherRows(a, index) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor2::zeros(r, c);
                for (out_row, &src) in index.iter().enumerate() {
                    for (dst, v) in d.row_mut(src).iter_mut().zip(g.row(out_row)) {
                        *dst += v;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::NormalizeRows(a, norms) => {
                // y = x/‖x‖, dx = (g − (g·y) y) / ‖x‖ while the norm is above the floor
                let y = &node.value;
                let mut d = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let n = norms[r];
                    if n > NORM_FLOOR {
                        let gy: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - gy * yv) / n;
                        }
                    } else {
                        for (o, &gv) in d.row_mut(r).iter_mut().zip(gr) {
                            *o = gv / n;
                        }
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::MaskedLogSoftmax(a, mask) => {
                // dx_j = g_j − p_j Σ_k g_k over retained entries
                let y = &node.value;
                let cols = y.cols();
                let mut d = Tensor2::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let m = &mask[r * cols..(r + 1) * cols];
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let gsum: f64 = (0..cols).filter(|&c| m[c]).map(|c| gr[c]).sum();
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        if m[c] {
                            *o = gr[c] - yr[c].exp() * gsum;
                        }
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::WeightedSum(a, w) => {
                accumulate(grads, *a, w.scale(g.data()[0]));
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(g: &Tensor2, x: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
    let data = g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect();
    Tensor2::from_vec(g.rows(), g.cols(), data).expect("shapes agree")
}

/// `log Σ exp(row[c])` over retained entries, `None` when nothing is retained.
pub(crate) fn masked_logsumexp(row: &[f64], mask: &[bool]) -> Option<f64> {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let s: f64 = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| (v - max).exp())
        .sum();
    Some(max + s.ln())
}
