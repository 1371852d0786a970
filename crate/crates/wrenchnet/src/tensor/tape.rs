//! Reverse-mode automatic differentiation over a flat op tape.
//!
//! A tape is rebuilt for every forward pass; nodes are appended in program
//! order and the backward sweep walks them in reverse, accumulating dense
//! gradients. Shape agreement between ops is a programming contract and
//! asserts; the loss entry points return errors for non-scalar or
//! non-finite losses, which is where NaN propagation surfaces.

use super::{
    add, add_row_bias, col_sum, concat_cols, gather_rows, gemm_into, layer_norm_forward, relu,
    scale, scatter_sum_rows, segment_mean_rows, slice_cols, Scalar, Tensor,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<S: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, S),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<u32>,
    },
    ScatterSumRows {
        x: NodeId,
        idx: Vec<u32>,
    },
    SegmentMean {
        x: NodeId,
        seg: Vec<u32>,
        counts: Vec<u32>,
    },
    MseLoss {
        pred: NodeId,
        target: Tensor<S>,
    },
    WeightedSum(Vec<(NodeId, S)>),
}

struct TapeNode<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Gradient per tape node, present where the backward sweep reached.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads[id.0].take()
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<TapeNode<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> NodeId {
        self.nodes.push(TapeNode { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = super::matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let v = add_row_bias(self.value(x), self.value(bias));
        self.push(v, Op::AddRowBias(x, bias))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = relu(self.value(x));
        self.push(v, Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (v, mean, rstd) = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = add(self.value(a), self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: NodeId, s: S) -> NodeId {
        let v = scale(self.value(x), s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = concat_cols(&tensors);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let v = slice_cols(self.value(x), start, width);
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<u32>) -> NodeId {
        let v = gather_rows(self.value(x), &idx);
        self.push(v, Op::GatherRows { x, idx })
    }

    pub fn scatter_sum_rows(&mut self, x: NodeId, idx: Vec<u32>, out_rows: usize) -> NodeId {
        let v = scatter_sum_rows(self.value(x), &idx, out_rows);
        self.push(v, Op::ScatterSumRows { x, idx })
    }

    pub fn segment_mean(&mut self, x: NodeId, seg: Vec<u32>, n_seg: usize) -> NodeId {
        let (v, counts) = segment_mean_rows(self.value(x), &seg, n_seg);
        self.push(v, Op::SegmentMean { x, seg, counts })
    }

    /// Mean-squared-error loss over all elements: scalar output.
    ///
    /// Non-finite predictions surface here as a numeric error.
    pub fn mse_loss(&mut self, pred: NodeId, target: Tensor<S>) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "mse: prediction {}x{} vs target {}x{}",
                p.rows(),
                p.cols(),
                target.rows(),
                target.cols()
            )));
        }
        if p.is_empty() {
            return Err(Error::Shape("mse over empty tensors".into()));
        }
        if !p.all_finite() {
            return Err(Error::Numeric("non-finite prediction at loss".into()));
        }
        let inv_n = 1.0 / p.len() as f64;
        let mut acc = 0.0;
        for (a, b) in p.data().iter().zip(target.data()) {
            let d = a.to_f64() - b.to_f64();
            acc += d * d;
        }
        let v = Tensor::scalar(S::from_f64(acc * inv_n));
        if !v.all_finite() {
            return Err(Error::Numeric("non-finite loss value".into()));
        }
        Ok(self.push(v, Op::MseLoss { pred, target }))
    }

    /// Weighted sum of scalar nodes, used to combine loss terms.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, S)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::Shape("weighted_sum of no terms".into()));
        }
        let mut acc = 0.0;
        for &(id, w) in terms {
            let t = self.value(id);
            if t.shape() != (1, 1) {
                return Err(Error::Shape(format!(
                    "weighted_sum term must be scalar, got {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
            acc += w.to_f64() * t.item().to_f64();
        }
        let v = Tensor::scalar(S::from_f64(acc));
        if !v.all_finite() {
            return Err(Error::Numeric("non-finite combined loss".into()));
        }
        Ok(self.push(v, Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        if !lv.all_finite() {
            return Err(Error::Numeric("non-finite loss at backward".into()));
        }

        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::ONE));

        fn acc<S: Scalar>(slot: &mut Option<Tensor<S>>, delta: Tensor<S>) {
            match slot {
                Some(t) => {
                    debug_assert_eq!(t.shape(), delta.shape());
                    for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                        *a += *b;
                    }
                }
                None => *slot = Some(delta),
            }
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    gemm_into(&mut ga, S::ZERO, S::ONE, &g, false, tb, true);
                    let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                    gemm_into(&mut gb, S::ZERO, S::ONE, ta, true, &g, false);
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::AddRowBias(x, bias) => {
                    acc(&mut grads[bias.0], col_sum(&g));
                    acc(&mut grads[x.0], g);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, xv) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if !(*xv > S::ZERO) {
                            *gv = S::ZERO;
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let cols = xv.cols();
                    let inv_n = S::from_f64(1.0 / cols as f64);
                    let mut gx = Tensor::zeros(xv.rows(), cols);
                    let mut ggamma = Tensor::zeros(1, cols);
                    let mut gbeta = Tensor::zeros(1, cols);
                    for r in 0..xv.rows() {
                        let grow = g.row(r);
                        let xrow = xv.row(r);
                        // dyhat = g * gamma; means over the row feed dx.
                        let mut sum_dyh = S::ZERO;
                        let mut sum_dyh_xhat = S::ZERO;
                        let mut xhat = vec![S::ZERO; cols];
                        let mut dyh = vec![S::ZERO; cols];
                        for c in 0..cols {
                            let xh = (xrow[c] - mean[r]) * rstd[r];
                            xhat[c] = xh;
                            let d = grow[c] * gv.data()[c];
                            dyh[c] = d;
                            sum_dyh += d;
                            sum_dyh_xhat += d * xh;
                            ggamma.data_mut()[c] += grow[c] * xh;
                            gbeta.data_mut()[c] += grow[c];
                        }
                        let m1 = sum_dyh * inv_n;
                        let m2 = sum_dyh_xhat * inv_n;
                        for c in 0..cols {
                            gx.set(r, c, rstd[r] * (dyh[c] - m1 - xhat[c] * m2));
                        }
                    }
                    acc(&mut grads[x.0], gx);
                    acc(&mut grads[gamma.0], ggamma);
                    acc(&mut grads[beta.0], gbeta);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[a.0], g.clone());
                    acc(&mut grads[b.0], g);
                }
                Op::Scale(x, s) => {
                    acc(&mut grads[x.0], scale(&g, *s));
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        acc(&mut grads[p.0], slice_cols(&g, off, w));
                        off += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gx.set(r, start + c, g.get(r, c));
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    acc(&mut grads[x.0], scatter_sum_rows(&g, idx, xv.rows()));
                }
                Op::ScatterSumRows { x, idx } => {
                    acc(&mut grads[x.0], gather_rows(&g, idx));
                }
                Op::SegmentMean { x, seg, counts } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (r, &s) in seg.iter().enumerate() {
                        let inv = S::from_f64(1.0 / counts[s as usize] as f64);
                        for c in 0..xv.cols() {
                            gx.set(r, c, g.get(s as usize, c) * inv);
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::MseLoss { pred, target } => {
                    let pv = self.value(*pred);
                    let coeff = S::from_f64(2.0 / pv.len() as f64) * g.item();
                    let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                    for ((gv, p), t) in gp
                        .data_mut()
                        .iter_mut()
                        .zip(pv.data())
                        .zip(target.data())
                    {
                        *gv = coeff * (*p - *t);
                    }
                    acc(&mut grads[pred.0], gp);
                }
                Op::WeightedSum(terms) => {
                    for &(id, w) in terms {
                        acc(&mut grads[id.0], Tensor::scalar(g.item() * w));
                    }
                }
            }
        }

        Ok(Gradients { grads })
    }
}
