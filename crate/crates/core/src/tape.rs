//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are evaluated eagerly and recorded in forward execution order;
//! [`Tape::backward`] replays them once in reverse, accumulating vector-
//! Jacobian products into every node a parameter feeds into. Nodes a
//! parameter does not reach are skipped during backward, so running pure
//! inference on a tape of constants costs nothing extra.
//!
//! Finiteness is enforced where values are consumed (the loss ops here, the
//! layer-stage checks in [`crate::lambda`], the trainer's per-batch loss
//! check), never silently ignored.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar;
use crate::tensor::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// out = A @ B
    Matmul(NodeId, NodeId),
    /// out = A^T
    Transpose(NodeId),
    /// exp-normalization along `axis` with max subtraction
    SoftmaxAxis(NodeId, usize),
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    /// out[i, j] = x[i, j] + b[i]
    AddBias(NodeId, NodeId),
    /// rows of `a` stacked over rows of `b`
    ConcatRows(NodeId, NodeId),
    /// out[i, j] = x[i, j] * w[i, j / 2] — per (cos, sin) pair gains
    PairScale(NodeId, NodeId),
    /// out[m, c] = sum_n kbar[m, n] * vals[m * c_block + c, n]
    BlockAttend(NodeId, NodeId),
    Sum(NodeId),
    /// mean squared error against a constant target
    Mse(NodeId, Tensor),
    /// mean binary cross-entropy on logits against a constant target
    BceWithLogits(NodeId, Tensor),
    /// mean cross-entropy of column softmax against class indices
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recording tape. One tape per differentiated computation; drop it when the
/// gradients have been read.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ---- raw kernels ----------------------------------------------------------

/// Row-major matmul, saxpy inner loop over the output row.
fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// (outer, axis_len, inner) strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn softmax_axis_raw(x: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0f32; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f32::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = 0.0f32;
            for j in 0..len {
                let e = scalar::exp(x[base + j * inner] - max);
                out[base + j * inner] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
    out
}

// ---- tape -----------------------------------------------------------------

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Record an input that gradients will not be computed for.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Record a trainable leaf; its gradient is available after backward.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass, if one reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    // -- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(va.data(), vb.data(), m, k, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(
            Op::Matmul(a, b),
            Tensor::new([m, n], out).expect("matmul output shape"),
            req,
        ))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: Vec::new(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(v.data(), r, c);
        let req = self.requires(x);
        Ok(self.push(
            Op::Transpose(x),
            Tensor::new([c, r], out).expect("transpose output shape"),
            req,
        ))
    }

    pub fn softmax_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(TensorError::BadAxis {
                axis,
                rank: v.rank(),
            });
        }
        let out = softmax_axis_raw(v.data(), v.shape(), axis);
        let shape = v.shape().to_vec();
        let req = self.requires(x);
        Ok(self.push(
            Op::SoftmaxAxis(x, axis),
            Tensor::new(shape, out).expect("softmax output shape"),
            req,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out: Vec<f32> = v.data().iter().map(|&a| a.max(0.0)).collect();
        let shape = v.shape().to_vec();
        let req = self.requires(x);
        self.push(
            Op::Relu(x),
            Tensor::new(shape, out).expect("relu output shape"),
            req,
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out: Vec<f32> = v.data().iter().map(|&a| scalar::sigmoid(a)).collect();
        let shape = v.shape().to_vec();
        let req = self.requires(x);
        self.push(
            Op::Sigmoid(x),
            Tensor::new(shape, out).expect("sigmoid output shape"),
            req,
        )
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let out: Vec<f32> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = va.shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(op, Tensor::new(shape, out).expect("elementwise shape"), req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let v = self.value(x);
        let out: Vec<f32> = v.data().iter().map(|&a| a * c).collect();
        let shape = v.shape().to_vec();
        let req = self.requires(x);
        self.push(
            Op::Scale(x, c),
            Tensor::new(shape, out).expect("scale shape"),
            req,
        )
    }

    /// Bias broadcast over positions: `x` is rows x cols, `b` has one entry
    /// per row.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (vx, vb) = (self.value(x), self.value(b));
        let (sx, sb) = (vx.shape(), vb.shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (r, c) = (sx[0], sx[1]);
        let mut out = vx.data().to_vec();
        for i in 0..r {
            let bv = vb.data()[i];
            for o in &mut out[i * c..(i + 1) * c] {
                *o += bv;
            }
        }
        let req = self.requires(x) || self.requires(b);
        Ok(self.push(
            Op::AddBias(x, b),
            Tensor::new([r, c], out).expect("add_bias shape"),
            req,
        ))
    }

    /// y[:, n] = w x[:, n] + b for every position n.
    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sw, sx) = (self.value(w).shape(), self.value(x).shape());
        if sw.len() != 2 || sx.len() != 2 || sw[1] != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1x1",
                lhs: sw.to_vec(),
                rhs: sx.to_vec(),
            });
        }
        let wx = self.matmul(w, x)?;
        self.add_bias(wx, b)
    }

    /// Stack rows of `a` on top of rows of `b` (same column count).
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut out = Vec::with_capacity(va.len() + vb.len());
        out.extend_from_slice(va.data());
        out.extend_from_slice(vb.data());
        let shape = [sa[0] + sb[0], sa[1]];
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(
            Op::ConcatRows(a, b),
            Tensor::new(shape, out).expect("concat shape"),
            req,
        ))
    }

    /// Scale column 2p and 2p+1 of every row i by w[i, p].
    pub fn pair_scale(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, TensorError> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[0] != sw[0] || sx[1] != sw[1] * 2 {
            return Err(TensorError::ShapeMismatch {
                op: "pair_scale",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (r, c) = (sx[0], sx[1]);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = vx.data()[i * c + j] * vw.data()[i * (c / 2) + j / 2];
            }
        }
        let req = self.requires(x) || self.requires(w);
        Ok(self.push(
            Op::PairScale(x, w),
            Tensor::new([r, c], out).expect("pair_scale shape"),
            req,
        ))
    }

    /// Per-row attention over stacked value blocks: `kbar` is M x N, `vals`
    /// is (M*C) x N viewed as M blocks of C rows, and
    /// out[m, c] = sum_n kbar[m, n] vals[m*C + c, n].
    pub fn block_attend(&mut self, kbar: NodeId, vals: NodeId) -> Result<NodeId, TensorError> {
        let (vk, vv) = (self.value(kbar), self.value(vals));
        let (sk, sv) = (vk.shape(), vv.shape());
        let ok = sk.len() == 2
            && sv.len() == 2
            && sk[1] == sv[1]
            && sk[0] > 0
            && sv[0] % sk[0] == 0;
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "block_attend",
                lhs: sk.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let (m, n) = (sk[0], sk[1]);
        let c = sv[0] / m;
        let mut out = vec![0.0f32; m * c];
        for mi in 0..m {
            let k_row = &vk.data()[mi * n..(mi + 1) * n];
            for ci in 0..c {
                let v_row = &vv.data()[(mi * c + ci) * n..(mi * c + ci + 1) * n];
                let mut acc = 0.0f32;
                for (kv, vv) in k_row.iter().zip(v_row) {
                    acc += kv * vv;
                }
                out[mi * c + ci] = acc;
            }
        }
        let req = self.requires(kbar) || self.requires(vals);
        Ok(self.push(
            Op::BlockAttend(kbar, vals),
            Tensor::new([m, c], out).expect("block_attend shape"),
            req,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let total: f32 = v.data().iter().sum();
        let req = self.requires(x);
        self.push(Op::Sum(x), Tensor::scalar(total), req)
    }

    // -- losses (mean-reduced scalars) ---------------------------------------

    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId, TensorError> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: vp.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = vp.len() as f32;
        let total: f32 = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let loss = total / n;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { stage: "mse" });
        }
        let req = self.requires(pred);
        Ok(self.push(Op::Mse(pred, target.clone()), Tensor::scalar(loss), req))
    }

    pub fn bce_with_logits(
        &mut self,
        pred: NodeId,
        target: &Tensor,
    ) -> Result<NodeId, TensorError> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: vp.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = vp.len() as f32;
        let total: f32 = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + scalar::ln_1p(scalar::exp(-x.abs())))
            .sum();
        let loss = total / n;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite {
                stage: "bce_with_logits",
            });
        }
        let req = self.requires(pred);
        Ok(self.push(
            Op::BceWithLogits(pred, target.clone()),
            Tensor::scalar(loss),
            req,
        ))
    }

    /// `logits` has one column per position with classes along rows;
    /// `classes` holds one class index per column.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        classes: &[usize],
    ) -> Result<NodeId, TensorError> {
        let v = self.value(logits);
        let s = v.shape();
        if s.len() != 2 || s[1] != classes.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![classes.len()],
            });
        }
        let (c, n) = (s[0], s[1]);
        for &t in classes {
            if t >= c {
                return Err(TensorError::ClassIndex {
                    index: t,
                    classes: c,
                });
            }
        }
        let mut total = 0.0f32;
        for p in 0..n {
            let mut max = f32::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(v.data()[ci * n + p]);
            }
            let mut sum = 0.0f32;
            for ci in 0..c {
                sum += scalar::exp(v.data()[ci * n + p] - max);
            }
            total += scalar::ln(sum) - (v.data()[classes[p] * n + p] - max);
        }
        let loss = total / n as f32;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite {
                stage: "softmax_cross_entropy",
            });
        }
        let req = self.requires(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy(logits, classes.to_vec()),
            Tensor::scalar(loss),
            req,
        ))
    }

    // -- backward ------------------------------------------------------------

    /// Populate gradients of every node reachable from `loss` that a
    /// parameter feeds into. `loss` must be a tracked scalar.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        {
            let v = self.value(loss);
            if !v.is_scalar() {
                return Err(TensorError::NotScalar {
                    shape: v.shape().to_vec(),
                });
            }
        }
        if !self.requires(loss) {
            return Err(TensorError::NotTracked);
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(shape, g).expect("grad shape"));
        }
        Ok(())
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f32>>],
        target: NodeId,
        contribution: impl FnOnce() -> Vec<f32>,
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let c = contribution();
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(&c) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(c),
        }
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                self.accumulate(grads, a, || {
                    let bt = transpose_raw(self.value(b).data(), k, n);
                    matmul_raw(g, &bt, m, n, k)
                });
                self.accumulate(grads, b, || {
                    let at = transpose_raw(self.value(a).data(), m, k);
                    matmul_raw(&at, g, k, m, n)
                });
            }
            Op::Transpose(x) => {
                let s = self.value(x).shape();
                let (r, c) = (s[0], s[1]);
                self.accumulate(grads, x, || transpose_raw(g, c, r));
            }
            Op::SoftmaxAxis(x, axis) => {
                let y = self.nodes[i].value.data();
                let shape = self.nodes[i].value.shape();
                let (outer, len, inner) = axis_split(shape, axis);
                self.accumulate(grads, x, || {
                    let mut dx = vec![0.0f32; y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut dot = 0.0f32;
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += g[idx] * y[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                dx[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    dx
                });
            }
            Op::Relu(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, || {
                    g.iter()
                        .zip(xv)
                        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                        .collect()
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                self.accumulate(grads, x, || {
                    g.iter().zip(y).map(|(&d, &s)| d * s * (1.0 - s)).collect()
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, || g.to_vec());
                self.accumulate(grads, b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, || g.to_vec());
                self.accumulate(grads, b, || g.iter().map(|&d| -d).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, || g.iter().zip(vb).map(|(&d, &v)| d * v).collect());
                self.accumulate(grads, b, || g.iter().zip(va).map(|(&d, &v)| d * v).collect());
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, x, || g.iter().map(|&d| d * c).collect());
            }
            Op::AddBias(x, b) => {
                let s = self.value(x).shape();
                let (r, c) = (s[0], s[1]);
                self.accumulate(grads, x, || g.to_vec());
                self.accumulate(grads, b, || {
                    (0..r)
                        .map(|ri| g[ri * c..(ri + 1) * c].iter().sum())
                        .collect()
                });
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(a).shape()[0];
                let c = self.value(a).shape()[1];
                self.accumulate(grads, a, || g[..ra * c].to_vec());
                self.accumulate(grads, b, || g[ra * c..].to_vec());
            }
            Op::PairScale(x, w) => {
                let (vx, vw) = (self.value(x).data(), self.value(w).data());
                let s = self.value(x).shape();
                let (r, c) = (s[0], s[1]);
                self.accumulate(grads, x, || {
                    let mut dx = vec![0.0f32; r * c];
                    for ri in 0..r {
                        for j in 0..c {
                            dx[ri * c + j] = g[ri * c + j] * vw[ri * (c / 2) + j / 2];
                        }
                    }
                    dx
                });
                self.accumulate(grads, w, || {
                    let mut dw = vec![0.0f32; r * (c / 2)];
                    for ri in 0..r {
                        for j in 0..c {
                            dw[ri * (c / 2) + j / 2] += g[ri * c + j] * vx[ri * c + j];
                        }
                    }
                    dw
                });
            }
            Op::BlockAttend(kbar, vals) => {
                let (vk, vv) = (self.value(kbar).data(), self.value(vals).data());
                let sk = self.value(kbar).shape();
                let (m, n) = (sk[0], sk[1]);
                let c = self.value(vals).shape()[0] / m;
                self.accumulate(grads, kbar, || {
                    let mut dk = vec![0.0f32; m * n];
                    for mi in 0..m {
                        for ci in 0..c {
                            let d = g[mi * c + ci];
                            let v_row = &vv[(mi * c + ci) * n..(mi * c + ci + 1) * n];
                            for (slot, &v) in dk[mi * n..(mi + 1) * n].iter_mut().zip(v_row) {
                                *slot += d * v;
                            }
                        }
                    }
                    dk
                });
                self.accumulate(grads, vals, || {
                    let mut dv = vec![0.0f32; m * c * n];
                    for mi in 0..m {
                        let k_row = &vk[mi * n..(mi + 1) * n];
                        for ci in 0..c {
                            let d = g[mi * c + ci];
                            let row = &mut dv[(mi * c + ci) * n..(mi * c + ci + 1) * n];
                            for (slot, &kv) in row.iter_mut().zip(k_row) {
                                *slot = d * kv;
                            }
                        }
                    }
                    dv
                });
            }
            Op::Sum(x) => {
                let len = self.value(x).len();
                self.accumulate(grads, x, || vec![g[0]; len]);
            }
            Op::Mse(pred, ref target) => {
                let vp = self.value(pred).data();
                let n = vp.len() as f32;
                let d = g[0];
                self.accumulate(grads, pred, || {
                    vp.iter()
                        .zip(target.data())
                        .map(|(&p, &t)| d * 2.0 * (p - t) / n)
                        .collect()
                });
            }
            Op::BceWithLogits(pred, ref target) => {
                let vp = self.value(pred).data();
                let n = vp.len() as f32;
                let d = g[0];
                self.accumulate(grads, pred, || {
                    vp.iter()
                        .zip(target.data())
                        .map(|(&x, &t)| d * (scalar::sigmoid(x) - t) / n)
                        .collect()
                });
            }
            Op::SoftmaxCrossEntropy(logits, ref classes) => {
                let v = self.value(logits).data();
                let s = self.value(logits).shape();
                let (c, n) = (s[0], s[1]);
                let d = g[0];
                self.accumulate(grads, logits, || {
                    let mut dz = vec![0.0f32; c * n];
                    for p in 0..n {
                        let mut max = f32::NEG_INFINITY;
                        for ci in 0..c {
                            max = max.max(v[ci * n + p]);
                        }
                        let mut sum = 0.0f32;
                        for ci in 0..c {
                            let e = scalar::exp(v[ci * n + p] - max);
                            dz[ci * n + p] = e;
                            sum += e;
                        }
                        for ci in 0..c {
                            let mut soft = dz[ci * n + p] / sum;
                            if ci == classes[p] {
                                soft -= 1.0;
                            }
                            dz[ci * n + p] = d * soft / n as f32;
                        }
                    }
                    dz
                });
            }
        }
    }
}
