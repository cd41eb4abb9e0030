//! Reverse-mode differentiation over a recorded graph of dense matrix ops.
//!
//! A [`Tape`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a single reverse sweep over the node list visits
//! every node after all of its consumers.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Lower clip applied to probabilities inside [`Tape::log_loss`].
pub const LOG_LOSS_CLIP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("loss must be a 1x1 scalar, got shape {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },
    #[error("embedding index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("empty bag at row {row}")]
    EmptyBag { row: usize },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    OneMinus(NodeId),
    Recip(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Abs(NodeId),
    Clamp(NodeId, f64, f64),
    LogLoss(NodeId, Tensor),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    Bag(NodeId, Vec<Vec<(usize, f64)>>),
    Sum(NodeId),
    SumSquares(NodeId),
    DivScalar(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation graph for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TapeError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(TapeError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|x|` seen at the input of a non-differentiable point
    /// (rectifier or absolute value). Finite-difference checks use this to
    /// reject instances that straddle a kink.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn note_kinks(&mut self, t: &Tensor) {
        for &x in t.data() {
            let a = x.abs();
            if a < self.kink_margin {
                self.kink_margin = a;
            }
        }
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Trainable leaf, copied from the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(Op::Param(id), store.get(id).clone())
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul(vb).ok_or(TapeError::ShapeMismatch {
            op: "matmul",
            left: va.shape(),
            right: vb.shape(),
        })?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `x (n x m) + bias (1 x m)` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TapeError> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(TapeError::ShapeMismatch {
                op: "add_bias",
                left: vx.shape(),
                right: vb.shape(),
            });
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_slice_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        Ok(self.push(op, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| 1.0 - x);
        self.push(Op::OneMinus(a), out)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(math::sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.note_kinks(&v);
        let out = v.map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), out)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(math::softplus);
        self.push(Op::Softplus(a), out)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.note_kinks(&v);
        let out = v.map(f64::abs);
        self.push(Op::Abs(a), out)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), out)
    }

    /// Elementwise binary cross-entropy `-r ln p - (1-r) ln(1-p)` with `p`
    /// clipped into `[1e-12, 1 - 1e-12]`.
    pub fn log_loss(&mut self, pred: NodeId, labels: Tensor) -> Result<NodeId, TapeError> {
        let vp = self.value(pred);
        check_same("log_loss", vp, &labels)?;
        let data = vp
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&p, &r)| log_loss_value(r, p))
            .collect();
        let out = Tensor::from_vec(vp.rows(), vp.cols(), data);
        Ok(self.push(Op::LogLoss(pred, labels), out))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TapeError> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(TapeError::ShapeMismatch {
                    op: "concat",
                    left: [rows, cols],
                    right: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let w = v.cols();
            for r in 0..rows {
                out.row_slice_mut(r)[offset..offset + w].copy_from_slice(v.row_slice(r));
            }
            offset += w;
        }
        Ok(self.push(Op::Concat(parts.to_vec()), out))
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId, TapeError> {
        let t = self.value(table);
        let dim = t.cols();
        let mut out = Tensor::zeros(indices.len(), dim);
        for (i, &ix) in indices.iter().enumerate() {
            if ix >= t.rows() {
                return Err(TapeError::IndexOutOfRange {
                    index: ix,
                    rows: t.rows(),
                });
            }
            out.row_slice_mut(i).copy_from_slice(t.row_slice(ix));
        }
        Ok(self.push(Op::Gather(table, indices), out))
    }

    /// Weighted mean pooling: output row `i` is `sum_k w_k * table[id_k] / K`.
    pub fn bag(
        &mut self,
        table: NodeId,
        bags: Vec<Vec<(usize, f64)>>,
    ) -> Result<NodeId, TapeError> {
        let t = self.value(table);
        let dim = t.cols();
        let mut out = Tensor::zeros(bags.len(), dim);
        for (i, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(TapeError::EmptyBag { row: i });
            }
            let k = bag.len() as f64;
            let row = out.row_slice_mut(i);
            for &(ix, w) in bag {
                if ix >= t.rows() {
                    return Err(TapeError::IndexOutOfRange {
                        index: ix,
                        rows: t.rows(),
                    });
                }
                for (o, e) in row.iter_mut().zip(t.row_slice(ix)) {
                    *o += w * e;
                }
            }
            for o in row.iter_mut() {
                *o /= k;
            }
        }
        Ok(self.push(Op::Bag(table, bags), out))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum_squares();
        self.push(Op::SumSquares(a), Tensor::scalar(s))
    }

    /// `a / s` with `s` a `1 x 1` node.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, TapeError> {
        let vs = self.value(s);
        let d = vs.item().ok_or(TapeError::ShapeMismatch {
            op: "div_scalar",
            left: self.value(a).shape(),
            right: vs.shape(),
        })?;
        let out = self.value(a).map(|x| x / d);
        Ok(self.push(Op::DivScalar(a, s), out))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TapeError> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(TapeError::NonScalarLoss { shape: lv.shape() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                    let mut da = Tensor::zeros(n, k);
                    for i in 0..n {
                        let g_row = g.row_slice(i);
                        let da_row = da.row_slice_mut(i);
                        for (p, d) in da_row.iter_mut().enumerate() {
                            let b_row = vb.row_slice(p);
                            *d = g_row.iter().zip(b_row).fold(0.0, |acc, (x, y)| acc + x * y);
                        }
                    }
                    let mut db = Tensor::zeros(k, m);
                    for i in 0..n {
                        let a_row = va.row_slice(i);
                        let g_row = g.row_slice(i);
                        for (p, &a_ip) in a_row.iter().enumerate() {
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db.row_slice_mut(p).iter_mut().zip(g_row) {
                                *d += a_ip * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(x, b) => {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&g, self.value(*b), |gv, y| gv * y);
                    let db = zip_map(&g, self.value(*a), |gv, x| gv * x);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::OneMinus(a) => accumulate(&mut grads, *a, g.map(|x| -x)),
                Op::Recip(a) => {
                    let d = zip_map(&g, self.value(*a), |gv, x| -gv / (x * x));
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = zip_map(&g, &node.value, |gv, y| gv * y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = zip_map(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let d = zip_map(&g, self.value(*a), |gv, x| gv * math::sigmoid(x));
                    accumulate(&mut grads, *a, d);
                }
                Op::Abs(a) => {
                    let d = zip_map(&g, self.value(*a), |gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let d = zip_map(&g, self.value(*a), |gv, x| {
                        if x >= lo && x <= hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::LogLoss(p, labels) => {
                    let vp = self.value(*p);
                    let data = g
                        .data()
                        .iter()
                        .zip(vp.data())
                        .zip(labels.data())
                        .map(|((&gv, &p), &r)| {
                            // Written out so a NaN probability keeps a NaN gradient.
                            if p < LOG_LOSS_CLIP || p > 1.0 - LOG_LOSS_CLIP {
                                0.0
                            } else {
                                gv * (-r / p + (1.0 - r) / (1.0 - p))
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *p, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut d = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_slice_mut(r)
                                .copy_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, d);
                    }
                }
                Op::Gather(table, indices) => {
                    let t = self.value(*table);
                    let mut d = Tensor::zeros(t.rows(), t.cols());
                    for (i, &ix) in indices.iter().enumerate() {
                        for (o, v) in d.row_slice_mut(ix).iter_mut().zip(g.row_slice(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::Bag(table, bags) => {
                    let t = self.value(*table);
                    let mut d = Tensor::zeros(t.rows(), t.cols());
                    for (i, bag) in bags.iter().enumerate() {
                        let k = bag.len() as f64;
                        for &(ix, w) in bag {
                            let c = w / k;
                            for (o, v) in d.row_slice_mut(ix).iter_mut().zip(g.row_slice(i)) {
                                *o += c * v;
                            }
                        }
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(va.rows(), va.cols(), gv));
                }
                Op::SumSquares(a) => {
                    let gv = g.data()[0];
                    let d = self.value(*a).map(|x| 2.0 * x * gv);
                    accumulate(&mut grads, *a, d);
                }
                Op::DivScalar(a, s) => {
                    let sv = self.value(*s).data()[0];
                    let va = self.value(*a);
                    let ds = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .fold(0.0, |acc, (gv, x)| acc + gv * x)
                        * (-1.0 / (sv * sv));
                    accumulate(&mut grads, *s, Tensor::scalar(ds));
                    accumulate(&mut grads, *a, g.map(|x| x / sv));
                }
            }
        }

        let mut params: Vec<Option<Tensor>> = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if params.len() <= pid.0 {
                    params.resize(pid.0 + 1, None);
                }
                if let Some(g) = &grads[idx] {
                    match &mut params[pid.0] {
                        Some(acc) => acc.add_assign(g),
                        slot @ None => *slot = Some(g.clone()),
                    }
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

/// Binary cross-entropy for one prediction with the tape's clipping rule.
#[inline]
pub(crate) fn log_loss_value(r: f64, p: f64) -> f64 {
    let p = p.clamp(LOG_LOSS_CLIP, 1.0 - LOG_LOSS_CLIP);
    -r * math::ln(p) - (1.0 - r) * math::ln(1.0 - p)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter, summed over every place it entered the
    /// graph. `None` when the parameter did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to a leaf node (constant or parameter).
    /// Interior adjoints are released during the sweep.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    /// Squared L2 norm of the gradient of a parameter (0 when absent).
    pub fn param_norm_sq(&self, id: ParamId) -> f64 {
        self.param(id).map(Tensor::sum_squares).unwrap_or(0.0)
    }
}
