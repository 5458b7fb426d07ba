//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every differentiable operation appends a node holding its output value
//! and the identities of its inputs; nodes are therefore already in
//! topological order. `backward` walks the tape once in reverse and
//! accumulates gradients into every `requires_grad` leaf reachable from the
//! loss. Leaves that are not reachable get zero gradients.
//!
//! Each operation validates shapes up front and checks its output for
//! NaN/Inf afterwards; a non-finite result is an error, never a silent
//! state.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::flops::FlopCounter;
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, matmul_nn, matmul_nt, matmul_tn, Result, Tensor, TensorError};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Axis selector for the 2-d ops. The axis names the dimension that is
/// reduced, normalized, or concatenated over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Matmul(NodeId, NodeId),
    /// `a * b^T`; saves a transpose in attention scores and LoRA paths.
    MatmulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Broadcast-add a `1 x n` row vector to every row of `a`.
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    Softmax(NodeId, Axis),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    Concat(Axis, Vec<NodeId>),
    Slice {
        x: NodeId,
        axis: Axis,
        start: usize,
        len: usize,
    },
    SelectRows {
        x: NodeId,
        indices: Vec<usize>,
    },
    Mean(NodeId, Axis),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    /// Mean over rows of KL(softmax(teacher) || softmax(student)).
    KlDiv {
        student: NodeId,
        teacher: NodeId,
    },
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded forward computation plus the instrumented FLOP counter.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    flops: FlopCounter,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss w.r.t. the node, if one was populated.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }
}

fn ensure_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn want_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected a 2-d tensor, got shape {:?}", t.shape()),
        })
    }
}

fn want_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        })
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            flops: FlopCounter::new(),
        }
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn flops_mut(&mut self) -> &mut FlopCounter {
        &mut self.flops
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts a leaf without copying the underlying buffer.
    pub fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(Arc::new(value), false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        want_matrix("matmul", av)?;
        want_matrix("matmul", bv)?;
        if av.cols() != bv.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} * {:?}", av.shape(), bv.shape()),
            });
        }
        let out = matmul_nn(av, bv);
        self.flops.record_matmul(av.rows(), av.cols(), bv.cols());
        ensure_finite("matmul", &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul(a, b), ng))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        want_matrix("matmul_nt", av)?;
        want_matrix("matmul_nt", bv)?;
        if av.cols() != bv.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("{:?} * {:?}^T", av.shape(), bv.shape()),
            });
        }
        let out = matmul_nt(av, bv);
        self.flops.record_matmul(av.rows(), av.cols(), bv.rows());
        ensure_finite("matmul_nt", &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatmulNt(a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        want_same_shape("add", av, bv)?;
        let mut out = av.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o += v;
        }
        ensure_finite("add", &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        want_same_shape("sub", av, bv)?;
        let mut out = av.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o -= v;
        }
        ensure_finite("sub", &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        want_same_shape("mul", av, bv)?;
        let mut out = av.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= v;
        }
        ensure_finite("mul", &out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        want_matrix("add_row", av)?;
        if rv.shape() != [1, av.cols()] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                detail: format!("rows of {:?} + {:?}", av.shape(), rv.shape()),
            });
        }
        let mut out = av.clone();
        let r = rv.data();
        for i in 0..out.rows() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(r) {
                *o += v;
            }
        }
        ensure_finite("add_row", &out)?;
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let out = self.value(a).map(|v| v * c);
        ensure_finite("scale", &out)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Scale(a, c), ng))
    }

    /// Exact-form GELU: `0.5 * x * (1 + erf(x / sqrt(2)))`.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(core::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .value(a)
            .map(|v| half * v * (T::ONE + (v * inv_sqrt2).erf()));
        ensure_finite("gelu", &out)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Gelu(a), ng))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        let av = self.value(a);
        want_matrix("softmax", av)?;
        let out = match axis {
            Axis::Cols => softmax_rows(av),
            Axis::Rows => softmax_rows(&av.transposed()).transposed(),
        };
        ensure_finite("softmax", &out)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Softmax(a, axis), ng))
    }

    /// Per-row normalization over the last axis, then affine gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        want_matrix("layer_norm", xv)?;
        let d = xv.cols();
        if gv.shape() != [1, d] || bv.shape() != [1, d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} for width {d}",
                    gv.shape(),
                    bv.shape()
                ),
            });
        }
        let epst = T::from_f64(eps);
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let (mean, inv_std) = row_moments(row, epst);
            for (j, v) in row.iter_mut().enumerate() {
                *v = gv.data()[j] * ((*v - mean) * inv_std) + bv.data()[j];
            }
        }
        ensure_finite("layer_norm", &out)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps: epst,
            },
            ng,
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        want_matrix("transpose", av)?;
        let out = av.transposed();
        let ng = self.needs(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(a).reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn concat(&mut self, axis: Axis, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "concat",
                detail: "no parts".into(),
            });
        }
        for &p in parts {
            want_matrix("concat", self.value(p))?;
        }
        let out = match axis {
            Axis::Rows => {
                let cols = self.value(parts[0]).cols();
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let v = self.value(p);
                    if v.cols() != cols {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            detail: format!("column widths differ: {} vs {}", cols, v.cols()),
                        });
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor::matrix(rows, cols, data)?
            }
            Axis::Cols => {
                let rows = self.value(parts[0]).rows();
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                for &p in parts {
                    if self.value(p).rows() != rows {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            detail: "row counts differ".into(),
                        });
                    }
                }
                let mut data = Vec::with_capacity(rows * total);
                for i in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::matrix(rows, total, data)?
            }
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(axis, parts.to_vec()), ng))
    }

    pub fn slice(&mut self, x: NodeId, axis: Axis, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        want_matrix("slice", xv)?;
        let extent = match axis {
            Axis::Rows => xv.rows(),
            Axis::Cols => xv.cols(),
        };
        if start + len > extent {
            return Err(TensorError::Contract {
                op: "slice",
                detail: format!("range {start}..{} out of extent {extent}", start + len),
            });
        }
        let out = match axis {
            Axis::Rows => {
                let cols = xv.cols();
                Tensor::matrix(
                    len,
                    cols,
                    xv.data()[start * cols..(start + len) * cols].to_vec(),
                )?
            }
            Axis::Cols => {
                let mut data = Vec::with_capacity(xv.rows() * len);
                for i in 0..xv.rows() {
                    data.extend_from_slice(&xv.row(i)[start..start + len]);
                }
                Tensor::matrix(xv.rows(), len, data)?
            }
        };
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            ng,
        ))
    }

    /// Gathers rows in the given order; the gradient scatter-adds back.
    pub fn select_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        want_matrix("select_rows", xv)?;
        let cols = xv.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= xv.rows() {
                return Err(TensorError::Contract {
                    op: "select_rows",
                    detail: format!("row {i} out of range 0..{}", xv.rows()),
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::matrix(indices.len(), cols, data)?;
        let ng = self.needs(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn mean(&mut self, x: NodeId, axis: Axis) -> Result<NodeId> {
        let xv = self.value(x);
        want_matrix("mean", xv)?;
        let (m, n) = (xv.rows(), xv.cols());
        let out = match axis {
            Axis::Rows => {
                if m == 0 {
                    return Err(TensorError::Contract {
                        op: "mean",
                        detail: "empty reduction axis".into(),
                    });
                }
                let inv = T::ONE / T::from_usize(m);
                let mut acc = vec![T::ZERO; n];
                for i in 0..m {
                    axpy(&mut acc, T::ONE, xv.row(i));
                }
                for v in &mut acc {
                    *v *= inv;
                }
                Tensor::matrix(1, n, acc)?
            }
            Axis::Cols => {
                if n == 0 {
                    return Err(TensorError::Contract {
                        op: "mean",
                        detail: "empty reduction axis".into(),
                    });
                }
                let inv = T::ONE / T::from_usize(n);
                let data = (0..m)
                    .map(|i| xv.row(i).iter().copied().sum::<T>() * inv)
                    .collect();
                Tensor::matrix(m, 1, data)?
            }
        };
        ensure_finite("mean", &out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Mean(x, axis), ng))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let out = Tensor::scalar(total);
        ensure_finite("sum", &out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Sum(x), ng))
    }

    /// Mean negative log-likelihood against integer class targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        want_matrix("cross_entropy", lv)?;
        if targets.len() != lv.rows() {
            return Err(TensorError::Contract {
                op: "cross_entropy",
                detail: format!("{} targets for {} rows", targets.len(), lv.rows()),
            });
        }
        let mut total = T::ZERO;
        for (i, &t) in targets.iter().enumerate() {
            if t >= lv.cols() {
                return Err(TensorError::Contract {
                    op: "cross_entropy",
                    detail: format!("target {t} out of {} classes", lv.cols()),
                });
            }
            let row = lv.row(i);
            total += log_sum_exp(row) - row[t];
        }
        let out = Tensor::scalar(total / T::from_usize(targets.len()));
        ensure_finite("cross_entropy", &out)?;
        let ng = self.needs(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over rows of KL(softmax(teacher) || softmax(student)).
    /// Zero iff the two distributions coincide on every row.
    pub fn kl_div(&mut self, student: NodeId, teacher: NodeId) -> Result<NodeId> {
        let (sv, tv) = (self.value(student), self.value(teacher));
        want_same_shape("kl_div", sv, tv)?;
        want_matrix("kl_div", sv)?;
        let rows = sv.rows();
        let mut total = T::ZERO;
        for i in 0..rows {
            let log_q = log_softmax_row(sv.row(i));
            let log_p = log_softmax_row(tv.row(i));
            for (lp, lq) in log_p.iter().zip(&log_q) {
                total += lp.exp() * (*lp - *lq);
            }
        }
        let out = Tensor::scalar(total / T::from_usize(rows));
        ensure_finite("kl_div", &out)?;
        let ng = self.needs(student) || self.needs(teacher);
        Ok(self.push(out, Op::KlDiv { student, teacher }, ng))
    }

    /// Populates gradients of every `requires_grad` leaf reachable from the
    /// scalar `loss`; unreachable leaves get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::ONE]).unwrap());

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].clone().unwrap();
            self.backprop_node(idx, &g, &mut grads);
        }

        // Disconnected requires_grad leaves still report a (zero) gradient.
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) {
        let mut sink = |id: NodeId, delta: Tensor<T>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    sink(*a, matmul_nt(g, bv));
                }
                if self.needs(*b) {
                    sink(*b, matmul_tn(av, g));
                }
            }
            Op::MatmulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    sink(*a, matmul_nn(g, bv));
                }
                if self.needs(*b) {
                    sink(*b, matmul_tn(g, av));
                }
            }
            Op::Add(a, b) => {
                sink(*a, g.clone());
                sink(*b, g.clone());
            }
            Op::Sub(a, b) => {
                sink(*a, g.clone());
                sink(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut d = g.clone();
                    for (x, &y) in d.data_mut().iter_mut().zip(bv.data()) {
                        *x *= y;
                    }
                    sink(*a, d);
                }
                if self.needs(*b) {
                    let mut d = g.clone();
                    for (x, &y) in d.data_mut().iter_mut().zip(av.data()) {
                        *x *= y;
                    }
                    sink(*b, d);
                }
            }
            Op::AddRow(a, row) => {
                sink(*a, g.clone());
                if self.needs(*row) {
                    let n = g.cols();
                    let mut acc = vec![T::ZERO; n];
                    for i in 0..g.rows() {
                        axpy(&mut acc, T::ONE, g.row(i));
                    }
                    sink(*row, Tensor::matrix(1, n, acc).unwrap());
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                sink(*a, g.map(|v| v * c));
            }
            Op::Gelu(a) => {
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(core::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * core::f64::consts::PI).sqrt());
                let av = self.value(*a);
                let mut d = g.clone();
                for (x, &v) in d.data_mut().iter_mut().zip(av.data()) {
                    let cdf = half * (T::ONE + (v * inv_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                    *x *= cdf + v * pdf;
                }
                sink(*a, d);
            }
            Op::Softmax(a, axis) => {
                let y = self.value(NodeId(idx));
                let d = match axis {
                    Axis::Cols => softmax_backward_rows(g, y),
                    Axis::Rows => {
                        softmax_backward_rows(&g.transposed(), &y.transposed()).transposed()
                    }
                };
                sink(*a, d);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (m, d) = (xv.rows(), xv.cols());
                let invd = T::ONE / T::from_usize(d);
                let mut dx = Tensor::zeros(vec![m, d]);
                let mut dgain = vec![T::ZERO; d];
                let mut dbias = vec![T::ZERO; d];
                for i in 0..m {
                    let xrow = xv.row(i);
                    let grow = g.row(i);
                    let (mean, inv_std) = row_moments(xrow, *eps);
                    // gh = g .* gain; two row means drive the centered term.
                    let mut mean_gh = T::ZERO;
                    let mut mean_gh_xn = T::ZERO;
                    for j in 0..d {
                        let xn = (xrow[j] - mean) * inv_std;
                        let gh = grow[j] * gv.data()[j];
                        mean_gh += gh;
                        mean_gh_xn += gh * xn;
                        dgain[j] += grow[j] * xn;
                        dbias[j] += grow[j];
                    }
                    mean_gh *= invd;
                    mean_gh_xn *= invd;
                    let drow = dx.row_mut(i);
                    for j in 0..d {
                        let xn = (xrow[j] - mean) * inv_std;
                        let gh = grow[j] * gv.data()[j];
                        drow[j] = (gh - mean_gh - xn * mean_gh_xn) * inv_std;
                    }
                }
                sink(*x, dx);
                sink(*gain, Tensor::matrix(1, d, dgain).unwrap());
                sink(*bias, Tensor::matrix(1, d, dbias).unwrap());
            }
            Op::Transpose(a) => {
                sink(*a, g.transposed());
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                sink(*a, g.reshaped(shape).unwrap());
            }
            Op::Concat(axis, parts) => match axis {
                Axis::Rows => {
                    let mut start = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        let cols = g.cols();
                        let d = Tensor::matrix(
                            r,
                            cols,
                            g.data()[start * cols..(start + r) * cols].to_vec(),
                        )
                        .unwrap();
                        start += r;
                        sink(p, d);
                    }
                }
                Axis::Cols => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut data = Vec::with_capacity(g.rows() * c);
                        for i in 0..g.rows() {
                            data.extend_from_slice(&g.row(i)[start..start + c]);
                        }
                        start += c;
                        sink(p, Tensor::matrix(g.rows(), c, data).unwrap());
                    }
                }
            },
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(xv.shape().to_vec());
                    match axis {
                        Axis::Rows => {
                            for i in 0..*len {
                                d.row_mut(start + i).copy_from_slice(g.row(i));
                            }
                        }
                        Axis::Cols => {
                            for i in 0..xv.rows() {
                                d.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                            }
                        }
                    }
                    sink(*x, d);
                }
            }
            Op::SelectRows { x, indices } => {
                if self.needs(*x) {
                    let mut d = Tensor::zeros(self.value(*x).shape().to_vec());
                    for (k, &i) in indices.iter().enumerate() {
                        axpy(d.row_mut(i), T::ONE, g.row(k));
                    }
                    sink(*x, d);
                }
            }
            Op::Mean(x, axis) => {
                let xv = self.value(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let mut d = Tensor::zeros(vec![m, n]);
                match axis {
                    Axis::Rows => {
                        let inv = T::ONE / T::from_usize(m);
                        for i in 0..m {
                            for (dv, &gv) in d.row_mut(i).iter_mut().zip(g.data()) {
                                *dv = gv * inv;
                            }
                        }
                    }
                    Axis::Cols => {
                        let inv = T::ONE / T::from_usize(n);
                        for i in 0..m {
                            let gi = g.data()[i] * inv;
                            for dv in d.row_mut(i) {
                                *dv = gi;
                            }
                        }
                    }
                }
                sink(*x, d);
            }
            Op::Sum(x) => {
                let gs = g.data()[0];
                let shape = self.value(*x).shape().to_vec();
                let mut d = Tensor::zeros(shape);
                for v in d.data_mut() {
                    *v = gs;
                }
                sink(*x, d);
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let scale = g.data()[0] / T::from_usize(targets.len());
                    let mut d = Tensor::zeros(lv.shape().to_vec());
                    for (i, &t) in targets.iter().enumerate() {
                        let probs = softmax_row(lv.row(i));
                        let drow = d.row_mut(i);
                        for (j, p) in probs.iter().enumerate() {
                            drow[j] = (*p - if j == t { T::ONE } else { T::ZERO }) * scale;
                        }
                    }
                    sink(*logits, d);
                }
            }
            Op::KlDiv { student, teacher } => {
                let (sv, tv) = (self.value(*student), self.value(*teacher));
                let scale = g.data()[0] / T::from_usize(sv.rows());
                if self.needs(*student) {
                    let mut d = Tensor::zeros(sv.shape().to_vec());
                    for i in 0..sv.rows() {
                        let q = softmax_row(sv.row(i));
                        let p = softmax_row(tv.row(i));
                        let drow = d.row_mut(i);
                        for j in 0..q.len() {
                            drow[j] = (q[j] - p[j]) * scale;
                        }
                    }
                    sink(*student, d);
                }
                if self.needs(*teacher) {
                    let mut d = Tensor::zeros(tv.shape().to_vec());
                    for i in 0..tv.rows() {
                        let log_q = log_softmax_row(sv.row(i));
                        let log_p = log_softmax_row(tv.row(i));
                        let kl: T = log_p
                            .iter()
                            .zip(&log_q)
                            .map(|(lp, lq)| lp.exp() * (*lp - *lq))
                            .sum();
                        let drow = d.row_mut(i);
                        for j in 0..log_p.len() {
                            drow[j] = log_p[j].exp() * (log_p[j] - log_q[j] - kl) * scale;
                        }
                    }
                    sink(*teacher, d);
                }
            }
        }
    }
}

fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len());
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::ONE / (var + eps).sqrt())
}

fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(row[0], |a, b| a.maximum(b));
    let mut out: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let total = out.iter().copied().sum::<T>();
    for v in &mut out {
        *v /= total;
    }
    out
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let lse = log_sum_exp(row);
    row.iter().map(|&v| v - lse).collect()
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(row[0], |a, b| a.maximum(b));
    let total = row.iter().map(|&v| (v - max).exp()).sum::<T>();
    max + total.ln()
}

fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let sm = softmax_row(row);
        row.copy_from_slice(&sm);
    }
    out
}

fn softmax_backward_rows<T: Scalar>(g: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let mut d = g.clone();
    for i in 0..d.rows() {
        let yrow = y.row(i);
        let inner = dot(d.row(i), yrow);
        for (dv, &yv) in d.row_mut(i).iter_mut().zip(yrow) {
            *dv = yv * (*dv - inner);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf64(tape: &mut Tape<f64>, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        tape.leaf(Arc::new(Tensor::matrix(rows, cols, data).unwrap()), true)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let eye = leaf64(&mut tape, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let a = leaf64(&mut tape, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let prod = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(prod).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = leaf64(&mut tape, 1, 2, vec![1.0, 2.0]);
        let c = leaf64(&mut tape, 2, 1, vec![3.0, 4.0]);
        let s = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(s).data(), &[11.0]);
    }

    #[test]
    fn matmul_counter_delta_is_two_mkn() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![3, 4]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        tape.flops_mut().start();
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.flops().total_flops(), 48);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![3, 4]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, 1, 3, vec![0.0, 0.0, 0.0]);
        let y = tape.softmax(x, Axis::Cols).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let a = leaf64(&mut tape, 1, 3, vec![0.5, 1.5, 2.5]);
        let b = leaf64(&mut tape, 1, 3, vec![100.5, 101.5, 102.5]);
        let ya = tape.softmax(a, Axis::Cols).unwrap();
        let yb = tape.softmax(b, Axis::Cols).unwrap();
        for (u, v) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((u - v).abs() < 1e-12, "shift invariance violated");
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, 1, 3, vec![1.0, 2.0, 3.0]);
        let y = tape.softmax(x, Axis::Cols).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, &v) in tape.value(y).data().iter().enumerate() {
            let direct = ((j + 1) as f64).exp() / z;
            assert!((v - direct).abs() / direct < 1e-12);
        }
        let total: f64 = tape.value(y).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let gain = leaf64(&mut tape, 1, 2, vec![1.0, 1.0]);
        let bias = leaf64(&mut tape, 1, 2, vec![0.0, 0.0]);

        // Constant row collapses to zero under eps regularization.
        let c = leaf64(&mut tape, 1, 2, vec![5.0, 5.0]);
        let y = tape.layer_norm(c, gain, bias, 1e-6).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }

        // [1, -1] already has unit variance.
        let u = leaf64(&mut tape, 1, 2, vec![1.0, -1.0]);
        let y = tape.layer_norm(u, gain, bias, 1e-6).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-5);
        assert!((tape.value(y).data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_moments_on_random_row() {
        let mut tape = Tape::<f64>::new();
        let d = 16;
        let data: Vec<f64> = (0..d).map(|i| ((i * 7919 + 13) % 101) as f64 / 17.0).collect();
        let x = leaf64(&mut tape, 1, d, data);
        let gain = leaf64(&mut tape, 1, d, vec![1.0; d]);
        let bias = leaf64(&mut tape, 1, d, vec![0.0; d]);
        let y = tape.layer_norm(x, gain, bias, 1e-6).unwrap();
        let out = tape.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / d as f64;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn backward_sum_gives_ones_and_square_gives_2w() {
        let mut tape = Tape::<f64>::new();
        let w = leaf64(&mut tape, 2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        let s = tape.sum(w).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let w = leaf64(&mut tape, 2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let w = leaf64(&mut tape, 2, 2, vec![1.0; 4]);
        assert!(matches!(
            tape.backward(w),
            Err(TensorError::Contract { .. })
        ));
    }

    #[test]
    fn disconnected_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let w = leaf64(&mut tape, 1, 2, vec![1.0, 2.0]);
        let unused = leaf64(&mut tape, 1, 3, vec![1.0, 2.0, 3.0]);
        let s = tape.sum(w).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn counter_linearity_over_sequenced_ops() {
        let run = |both: bool| -> u64 {
            let mut tape = Tape::<f32>::new();
            let a = tape.constant(Tensor::zeros(vec![5, 7]));
            let b = tape.constant(Tensor::zeros(vec![7, 3]));
            let c = tape.constant(Tensor::zeros(vec![3, 2]));
            tape.flops_mut().start();
            let ab = tape.matmul(a, b).unwrap();
            if both {
                tape.matmul(ab, c).unwrap();
            }
            tape.flops().total_flops()
        };
        let first_only = run(false);
        let second_only = 2 * 5 * 3 * 2;
        assert_eq!(run(true), first_only + second_only);
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut tape = Tape::<f32>::new();
        let big = tape.constant(Tensor::matrix(1, 1, vec![f32::MAX]).unwrap());
        let r = tape.mul(big, big); // overflows to +inf
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }

    // Central finite differences over every input element; the oracle only
    // evaluates forward passes, never the tape's backward rules.
    fn check_grads(build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId, inputs: &[Tensor<f64>]) {
        let run = |tensors: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
            let mut tape = Tape::<f64>::new();
            let ids: Vec<NodeId> = tensors
                .iter()
                .map(|t| tape.leaf(Arc::new(t.clone()), true))
                .collect();
            let loss = build(&mut tape, &ids);
            let grads = tape.backward(loss).unwrap();
            let gs = ids
                .iter()
                .map(|&id| grads.get(id).unwrap().clone())
                .collect();
            (tape.value(loss).data()[0], gs)
        };
        let (_, analytic) = run(inputs);
        let h = 1e-4;
        for (pi, t) in inputs.iter().enumerate() {
            for e in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[pi].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[pi].data_mut()[e] -= h;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                let ad = analytic[pi].data()[e];
                let scale = ad.abs().max(fd.abs()).max(1e-3);
                assert!(
                    (ad - fd).abs() / scale < 1e-4,
                    "input {pi} elem {e}: ad={ad} fd={fd}"
                );
            }
        }
    }

    fn t(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let data = (0..rows * cols)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            })
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn grad_matmul_chain() {
        check_grads(
            |tape, ids| {
                let p = tape.matmul(ids[0], ids[1]).unwrap();
                tape.sum(p).unwrap()
            },
            &[t(3, 4, 1), t(4, 2, 2)],
        );
    }

    #[test]
    fn grad_matmul_nt_and_transpose() {
        check_grads(
            |tape, ids| {
                let p = tape.matmul_nt(ids[0], ids[1]).unwrap();
                let pt = tape.transpose(p).unwrap();
                let q = tape.mul(pt, pt).unwrap();
                tape.sum(q).unwrap()
            },
            &[t(3, 4, 3), t(2, 4, 4)],
        );
    }

    #[test]
    fn grad_softmax_both_axes() {
        check_grads(
            |tape, ids| {
                let s = tape.softmax(ids[0], Axis::Cols).unwrap();
                let w = tape.mul(s, s).unwrap();
                tape.sum(w).unwrap()
            },
            &[t(3, 5, 5)],
        );
        check_grads(
            |tape, ids| {
                let s = tape.softmax(ids[0], Axis::Rows).unwrap();
                let w = tape.mul(s, s).unwrap();
                tape.sum(w).unwrap()
            },
            &[t(3, 5, 6)],
        );
    }

    #[test]
    fn grad_layer_norm_full() {
        check_grads(
            |tape, ids| {
                let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-6).unwrap();
                let w = tape.mul(y, y).unwrap();
                tape.sum(w).unwrap()
            },
            &[t(3, 6, 7), t(1, 6, 8), t(1, 6, 9)],
        );
    }

    #[test]
    fn grad_gelu_addrow_scale() {
        check_grads(
            |tape, ids| {
                let a = tape.add_row(ids[0], ids[1]).unwrap();
                let g = tape.gelu(a).unwrap();
                let s = tape.scale(g, 1.7).unwrap();
                tape.sum(s).unwrap()
            },
            &[t(4, 3, 10), t(1, 3, 11)],
        );
    }

    #[test]
    fn grad_concat_slice_select_mean() {
        check_grads(
            |tape, ids| {
                let c = tape.concat(Axis::Rows, &[ids[0], ids[1]]).unwrap();
                let sel = tape.select_rows(c, &[3, 0, 2]).unwrap();
                let sl = tape.slice(sel, Axis::Cols, 1, 2).unwrap();
                let m = tape.mean(sl, Axis::Rows).unwrap();
                let w = tape.mul(m, m).unwrap();
                tape.sum(w).unwrap()
            },
            &[t(2, 4, 12), t(3, 4, 13)],
        );
        check_grads(
            |tape, ids| {
                let c = tape.concat(Axis::Cols, &[ids[0], ids[1]]).unwrap();
                let m = tape.mean(c, Axis::Cols).unwrap();
                let w = tape.mul(m, m).unwrap();
                tape.sum(w).unwrap()
            },
            &[t(3, 2, 14), t(3, 3, 15)],
        );
    }

    #[test]
    fn grad_cross_entropy_and_kl() {
        check_grads(
            |tape, ids| tape.cross_entropy(ids[0], &[2, 0]).unwrap(),
            &[t(2, 4, 16)],
        );
        check_grads(
            |tape, ids| tape.kl_div(ids[0], ids[1]).unwrap(),
            &[t(3, 4, 17), t(3, 4, 18)],
        );
    }

    #[test]
    fn grad_sub_reshape() {
        check_grads(
            |tape, ids| {
                let d = tape.sub(ids[0], ids[1]).unwrap();
                let r = tape.reshape(d, vec![6, 2]).unwrap();
                let w = tape.mul(r, r).unwrap();
                tape.sum(w).unwrap()
            },
            &[t(3, 4, 19), t(3, 4, 20)],
        );
    }

    #[test]
    fn kl_zero_for_identical_logits_and_logc_for_uniform_student() {
        let mut tape = Tape::<f64>::new();
        let s = leaf64(&mut tape, 1, 5, vec![0.3, -0.2, 1.4, 0.0, -2.0]);
        let k = tape.kl_div(s, s).unwrap();
        assert!(tape.value(k).data()[0].abs() < 1e-12);

        // Near-one-hot teacher vs uniform student: KL -> log C.
        let c = 8;
        let mut teacher = vec![0.0; c];
        teacher[3] = 60.0;
        let mut tape = Tape::<f64>::new();
        let s = leaf64(&mut tape, 1, c, vec![0.0; c]);
        let tt = leaf64(&mut tape, 1, c, teacher);
        let k = tape.kl_div(s, tt).unwrap();
        let expect = (c as f64).ln();
        assert!((tape.value(k).data()[0] - expect).abs() < 1e-6);
    }
}
