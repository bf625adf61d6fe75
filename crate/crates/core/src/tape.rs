//! Reverse-mode autodiff on an append-only tape of enum-dispatched ops.
//!
//! Every forward op records its inputs by node id; `backward` walks the tape
//! in reverse insertion order (which is a reverse topological order by
//! construction) and accumulates gradients into the recorded inputs.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_row_masked, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, S),
    AddRowBroadcast(NodeId, NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: S,
    },
    EmbeddingGather {
        table: NodeId,
        ids: Rc<Vec<usize>>,
    },
    Dropout {
        x: NodeId,
        keep: Rc<Vec<bool>>,
        keep_prob: S,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Rc<Vec<usize>>,
        mask: Rc<Vec<bool>>,
        smoothing: S,
    },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Tape<S> {
    /// `rng_seed` drives dropout masks only; replaying the same op sequence
    /// with the same seed reproduces bit-identical values.
    pub fn new(rng_seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
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

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left_rows: ar,
                left_cols: ac,
                right_rows: br,
                right_cols: bc,
            });
        }
        let value = self.value(a).matmul(self.value(b));
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).transpose();
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if (ar, ac) != (br, bc) {
            return Err(Error::ShapeMismatch {
                op: "add",
                left_rows: ar,
                left_cols: ac,
                right_rows: br,
                right_cols: bc,
            });
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Adds a 1×cols row vector to every row of `x` (bias application).
    pub fn add_row_broadcast(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xr, xc) = self.value(x).shape();
        let (rr, rc) = self.value(row).shape();
        if rr != 1 || rc != xc {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                left_rows: xr,
                left_cols: xc,
                right_rows: rr,
                right_cols: rc,
            });
        }
        let mut value = self.value(x).clone();
        value.add_row_assign(self.value(row));
        let rg = self.needs_grad(&[x, row]);
        Ok(self.push(value, Op::AddRowBroadcast(x, row), rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = crate::tensor::relu(self.value(x));
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        crate::tensor::softmax_rows(&mut value);
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Row-wise softmax where `mask[i*cols + j] == false` forces weight 0.
    /// A row with no permitted entries is a contract violation.
    pub fn masked_softmax_rows(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (rows, cols) = self.value(x).shape();
        if mask.len() != rows * cols {
            return Err(Error::LengthMismatch {
                what: "masked_softmax mask",
                left: mask.len(),
                right: rows * cols,
            });
        }
        for i in 0..rows {
            if !mask[i * cols..(i + 1) * cols].iter().any(|&m| m) {
                return Err(Error::FullyMaskedRow { row: i });
            }
        }
        let mut value = self.value(x).clone();
        for i in 0..rows {
            softmax_row_masked(value.row_mut(i), Some(&mask[i * cols..(i + 1) * cols]));
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: S) -> Result<NodeId> {
        let (xr, xc) = self.value(x).shape();
        for (name, p) in [("layer_norm gain", gain), ("layer_norm bias", bias)] {
            let (pr, pc) = self.value(p).shape();
            if (pr, pc) != (1, xc) {
                return Err(Error::ShapeMismatch {
                    op: name,
                    left_rows: xr,
                    left_cols: xc,
                    right_rows: pr,
                    right_cols: pc,
                });
            }
        }
        let value =
            crate::tensor::layer_norm_rows(self.value(x), self.value(gain), self.value(bias), eps);
        let rg = self.needs_grad(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    /// Gathers `ids` rows of `table` into a new ids.len()×cols tensor.
    pub fn embedding_gather(&mut self, table: NodeId, ids: Rc<Vec<usize>>) -> Result<NodeId> {
        let (rows, cols) = self.value(table).shape();
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                vocab_size: rows,
            });
        }
        let mut value = Tensor::zeros(ids.len(), cols);
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(self.value(table).row(id));
        }
        let rg = self.needs_grad(&[table]);
        Ok(self.push(value, Op::EmbeddingGather { table, ids }, rg))
    }

    /// Inverted dropout: kept entries are scaled by 1/keep_prob so the
    /// expectation matches the identity; rate 0 is the exact identity.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        if rate == 0.0 {
            return x;
        }
        let keep_prob = 1.0 - rate;
        let n = self.value(x).len();
        let keep: Vec<bool> = (0..n).map(|_| self.rng.random::<f64>() < keep_prob).collect();
        let keep = Rc::new(keep);
        let kp = S::from_f64(keep_prob);
        let (rows, cols) = self.value(x).shape();
        let mut value = Tensor::zeros(rows, cols);
        for (i, (&v, &k)) in self.value(x).data().iter().zip(keep.iter()).enumerate() {
            value.data_mut()[i] = if k { v / kp } else { S::zero() };
        }
        let rg = self.needs_grad(&[x]);
        self.push(
            value,
            Op::Dropout {
                x,
                keep,
                keep_prob: kp,
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.value(x).slice_cols(start, len);
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).shape();
            if pr != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left_rows: rows,
                    left_cols: cols,
                    right_rows: pr,
                    right_cols: pc,
                });
            }
            cols += pc;
        }
        let mut value = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut at = 0;
            for &p in parts {
                let prow = self.value(p).row(i);
                value.row_mut(i)[at..at + prow.len()].copy_from_slice(prow);
                at += prow.len();
            }
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = S::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.needs_grad(&[x]);
        self.push(Tensor::scalar(acc), Op::Sum(x), rg)
    }

    /// Σ over masked rows of −log softmax(logits)[target], fused through
    /// log-sum-exp. With `smoothing` ε > 0 the one-hot target is mixed with
    /// the uniform distribution: q = (1−ε)·onehot + ε/V. Returns a 1×1 node.
    pub fn cross_entropy_from_logits(
        &mut self,
        logits: NodeId,
        targets: Rc<Vec<usize>>,
        mask: Rc<Vec<bool>>,
        smoothing: f64,
    ) -> Result<NodeId> {
        assert!(
            (0.0..1.0).contains(&smoothing),
            "label smoothing must be in [0, 1)"
        );
        let (rows, cols) = self.value(logits).shape();
        if targets.len() != rows {
            return Err(Error::LengthMismatch {
                what: "cross_entropy targets",
                left: targets.len(),
                right: rows,
            });
        }
        if mask.len() != rows {
            return Err(Error::LengthMismatch {
                what: "cross_entropy mask",
                left: mask.len(),
                right: rows,
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                vocab_size: cols,
            });
        }
        let eps = S::from_f64(smoothing);
        let uniform = eps / S::from_f64(cols as f64);
        let mut acc = S::zero();
        for i in 0..rows {
            if !mask[i] {
                continue;
            }
            let row = self.value(logits).row(i);
            let mut row_sum = S::zero();
            for &v in row {
                row_sum += v;
            }
            acc += log_sum_exp(row) - (S::one() - eps) * row[targets[i]] - uniform * row_sum;
        }
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                smoothing: eps,
            },
            rg,
        ))
    }

    fn add_grad(&mut self, id: NodeId, delta: Tensor<S>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&delta),
            None => node.grad = Some(delta),
        }
    }

    /// Backpropagates from a 1×1 `loss` node through the whole tape.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward requires a scalar loss node"
        );
        self.nodes[loss.0].grad = Some(Tensor::scalar(S::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let grad = match self.nodes[idx].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(idx, &grad);
            self.nodes[idx].grad = Some(grad);
        }
    }

    fn backward_op(&mut self, idx: usize, grad: &Tensor<S>) {
        // The op is cheap to reconstruct by value; masks and ids are Rc-shared.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let da = grad.matmul_nt(self.value(*b));
                let db = self.value(*a).matmul_tn(grad);
                self.add_grad(*a, da);
                self.add_grad(*b, db);
            }
            Op::Transpose(x) => {
                self.add_grad(*x, grad.transpose());
            }
            Op::Add(a, b) => {
                self.add_grad(*a, grad.clone());
                self.add_grad(*b, grad.clone());
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.add_grad(*x, grad.map(|v| v * c));
            }
            Op::AddRowBroadcast(x, row) => {
                let mut drow = Tensor::zeros(1, grad.cols());
                for i in 0..grad.rows() {
                    for (d, &g) in drow.row_mut(0).iter_mut().zip(grad.row(i)) {
                        *d += g;
                    }
                }
                self.add_grad(*x, grad.clone());
                self.add_grad(*row, drow);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(grad.rows(), grad.cols());
                for (i, (&g, &v)) in grad.data().iter().zip(xv.data()).enumerate() {
                    if v > S::zero() {
                        dx.data_mut()[i] = g;
                    }
                }
                self.add_grad(*x, dx);
            }
            Op::SoftmaxRows(x) => {
                // dx = (dy − ⟨dy, y⟩) ⊙ y per row; masked entries have y = 0.
                let y = &self.nodes[idx].value;
                let mut dx = Tensor::zeros(grad.rows(), grad.cols());
                for i in 0..grad.rows() {
                    let yrow = y.row(i);
                    let grow = grad.row(i);
                    let mut dot = S::zero();
                    for (&g, &yv) in grow.iter().zip(yrow) {
                        dot += g * yv;
                    }
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = (grow[j] - dot) * yrow[j];
                    }
                }
                self.add_grad(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x).clone();
                let gv = self.value(*gain).clone();
                let n = S::from_f64(xv.cols() as f64);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                let mut dgain = Tensor::zeros(1, xv.cols());
                let mut dbias = Tensor::zeros(1, xv.cols());
                for i in 0..xv.rows() {
                    let row = xv.row(i);
                    let mut mean = S::zero();
                    for &v in row {
                        mean += v;
                    }
                    mean /= n;
                    let mut var = S::zero();
                    for &v in row {
                        var += (v - mean) * (v - mean);
                    }
                    var /= n;
                    let inv = (var + *eps).sqrt().recip();
                    let grow = grad.row(i);
                    let mut s1 = S::zero();
                    let mut s2 = S::zero();
                    for j in 0..xv.cols() {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gv.get(0, j);
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                        dgain.data_mut()[j] += grow[j] * xhat;
                        dbias.data_mut()[j] += grow[j];
                    }
                    for j in 0..xv.cols() {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gv.get(0, j);
                        dx.set(i, j, inv * (dxhat - s1 / n - xhat * s2 / n));
                    }
                }
                self.add_grad(*x, dx);
                self.add_grad(*gain, dgain);
                self.add_grad(*bias, dbias);
            }
            Op::EmbeddingGather { table, ids } => {
                let (rows, cols) = self.value(*table).shape();
                let mut dt = Tensor::zeros(rows, cols);
                for (i, &id) in ids.iter().enumerate() {
                    for (d, &g) in dt.row_mut(id).iter_mut().zip(grad.row(i)) {
                        *d += g;
                    }
                }
                self.add_grad(*table, dt);
            }
            Op::Dropout { x, keep, keep_prob } => {
                let mut dx = Tensor::zeros(grad.rows(), grad.cols());
                for (i, (&g, &k)) in grad.data().iter().zip(keep.iter()).enumerate() {
                    if k {
                        dx.data_mut()[i] = g / *keep_prob;
                    }
                }
                self.add_grad(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor::zeros(rows, cols);
                for i in 0..rows {
                    dx.row_mut(i)[*start..*start + grad.cols()].copy_from_slice(grad.row(i));
                }
                self.add_grad(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    self.add_grad(p, grad.slice_cols(at, pc));
                    at += pc;
                }
            }
            Op::Sum(x) => {
                let g = grad.item();
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor::zeros(rows, cols);
                for v in dx.data_mut() {
                    *v = g;
                }
                self.add_grad(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                smoothing,
            } => {
                let g = grad.item();
                let lv = self.value(*logits).clone();
                let uniform = *smoothing / S::from_f64(lv.cols() as f64);
                let mut dl = Tensor::zeros(lv.rows(), lv.cols());
                for i in 0..lv.rows() {
                    if !mask[i] {
                        continue;
                    }
                    let row = lv.row(i);
                    let lse = log_sum_exp(row);
                    for j in 0..lv.cols() {
                        let p = (row[j] - lse).exp();
                        let q = if j == targets[i] {
                            S::one() - *smoothing + uniform
                        } else {
                            uniform
                        };
                        dl.set(i, j, g * (p - q));
                    }
                }
                self.add_grad(*logits, dl);
            }
        }
        self.nodes[idx].op = op;
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let mut max = S::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}
