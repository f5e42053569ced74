//! Reverse-mode autodiff on a linear operation tape.
//!
//! A forward pass appends one node per operation; `backward` walks the
//! record in exact reverse order and accumulates gradients into each node.
//! Parameter leaves remember their [`ParamId`] so gradients can be folded
//! back into the owning [`ParamStore`] afterwards.

use std::rc::Rc;

use thiserror::Error;

use super::array::{Elem, NdArray};
use super::params::{ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch in {op}: left shape {left:?}, right shape {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} requires {what}")]
    Invalid { op: &'static str, what: String },
    #[error("attention config error: model dim {dim} not divisible by {heads} heads")]
    BadHeadCount { dim: usize, heads: usize },
    #[error("cross-attention requires a non-empty context")]
    EmptyContext,
    #[error("cross_entropy target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward already ran on this graph; record a new forward first")]
    GraphConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op<E> {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
        ta: bool,
        tb: bool,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    AddRow {
        a: TensorId,
        row: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        k: f64,
    },
    Gelu {
        a: TensorId,
    },
    SoftmaxRows {
        a: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        // saved per-row statistics
        mean: Vec<E>,
        inv_std: Vec<E>,
    },
    CrossEntropy {
        logits: TensorId,
        target: usize,
        probs: Vec<E>,
    },
    SumAll {
        a: TensorId,
    },
    GatherRows {
        a: TensorId,
        idx: Rc<Vec<usize>>,
    },
    ConcatRows {
        parts: Vec<TensorId>,
    },
    SliceCols {
        a: TensorId,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<TensorId>,
    },
    GroupMaxPool {
        a: TensorId,
        argmax: Vec<usize>,
    },
}

struct Node<E> {
    value: NdArray<E>,
    op: Op<E>,
    param: Option<ParamId>,
}

/// Ordered record of one forward pass.
pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
    consumed: bool,
    grads: Vec<Option<NdArray<E>>>,
}

const LN_EPS: f64 = 1e-5;

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: NdArray<E>, op: Op<E>, param: Option<ParamId>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, op, param });
        id
    }

    /// Record a constant (non-parameter) input.
    pub fn leaf(&mut self, value: NdArray<E>) -> TensorId {
        self.push(value, Op::Leaf, None)
    }

    /// Mount a parameter's current value as a leaf. Its gradient is routed
    /// back to the store by [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, ps: &ParamStore<E>, id: ParamId) -> TensorId {
        self.push(ps.value(id).clone(), Op::Leaf, Some(id))
    }

    pub fn value(&self, t: TensorId) -> &NdArray<E> {
        &self.nodes[t.0].value
    }

    /// Gradient of the last backward pass w.r.t. node `t` (None if the node
    /// did not participate).
    pub fn grad(&self, t: TensorId) -> Option<&NdArray<E>> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NnError> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional operand transposes.
    pub fn matmul_t(
        &mut self,
        a: TensorId,
        b: TensorId,
        ta: bool,
        tb: bool,
    ) -> Result<TensorId, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, ka) = logical_dims(av, ta);
        let (kb, n) = logical_dims(bv, tb);
        if ka != kb {
            return Err(NnError::DimMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = NdArray::zeros(vec![m, n]);
        mm_acc(
            out.data_mut(),
            av.data(),
            av.rows(),
            av.cols(),
            ta,
            bv.data(),
            bv.rows(),
            bv.cols(),
            tb,
        );
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, None))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(NnError::DimMismatch {
                op: "add",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = NdArray::from_vec(av.shape().to_vec(), data);
        Ok(self.push(out, Op::Add { a, b }, None))
    }

    /// `a [R×C] + row [C]` broadcast over rows.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId, NnError> {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if av.cols() != rv.len() {
            return Err(NnError::DimMismatch {
                op: "add_row",
                left: av.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let c = av.cols();
        let mut out = av.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += rv.data()[i % c];
        }
        Ok(self.push(out, Op::AddRow { a, row }, None))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(NnError::DimMismatch {
                op: "sub",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| *x - *y)
            .collect();
        let out = NdArray::from_vec(av.shape().to_vec(), data);
        Ok(self.push(out, Op::Sub { a, b }, None))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, NnError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(NnError::DimMismatch {
                op: "mul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = NdArray::from_vec(av.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul { a, b }, None))
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let av = &self.nodes[a.0].value;
        let ke = E::lit(k);
        let data = av.data().iter().map(|x| *x * ke).collect();
        let out = NdArray::from_vec(av.shape().to_vec(), data);
        self.push(out, Op::Scale { a, k }, None)
    }

    /// Smooth GELU nonlinearity (tanh form).
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let av = &self.nodes[a.0].value;
        let data = av
            .data()
            .iter()
            .map(|x| E::lit(gelu_f64(x.as_f64())))
            .collect();
        let out = NdArray::from_vec(av.shape().to_vec(), data);
        self.push(out, Op::Gelu { a }, None)
    }

    /// Row-wise softmax with max-subtraction. `mask`, when given, marks
    /// valid columns; masked columns get exactly zero weight.
    pub fn softmax_rows(
        &mut self,
        a: TensorId,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<TensorId, NnError> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        if let Some(m) = &mask {
            if m.len() != c {
                return Err(NnError::Invalid {
                    op: "softmax_rows",
                    what: format!("mask length {} != {} columns", m.len(), c),
                });
            }
            if !m.iter().any(|&v| v) {
                return Err(NnError::Invalid {
                    op: "softmax_rows",
                    what: "all columns masked".into(),
                });
            }
        }
        let mut out = NdArray::zeros(vec![r, c]);
        for i in 0..r {
            let row = av.row(i);
            let mut mx = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if mask.as_ref().map_or(true, |m| m[j]) {
                    mx = mx.max(v.as_f64());
                }
            }
            let mut sum = 0.0f64;
            let orow = &mut out.data_mut()[i * c..(i + 1) * c];
            for (j, v) in row.iter().enumerate() {
                if mask.as_ref().map_or(true, |m| m[j]) {
                    let e = (v.as_f64() - mx).exp();
                    orow[j] = E::lit(e);
                    sum += e;
                }
            }
            for v in orow.iter_mut() {
                *v = E::lit(v.as_f64() / sum);
            }
        }
        Ok(self.push(out, Op::SoftmaxRows { a }, None))
    }

    /// Per-row normalization to zero mean / unit variance, then affine.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, NnError> {
        let xv = &self.nodes[x.0].value;
        let (r, c) = (xv.rows(), xv.cols());
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        if gv.len() != c || bv.len() != c {
            return Err(NnError::DimMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let mut out = NdArray::zeros(vec![r, c]);
        let mut means = Vec::with_capacity(r);
        let mut inv_stds = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().fold(0.0, |s, v| s + v.as_f64()) / c as f64;
            let var = row
                .iter()
                .fold(0.0, |s, v| s + (v.as_f64() - mean).powi(2))
                / c as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            means.push(E::lit(mean));
            inv_stds.push(E::lit(inv_std));
            let orow = &mut out.data_mut()[i * c..(i + 1) * c];
            for j in 0..c {
                let xh = (row[j].as_f64() - mean) * inv_std;
                orow[j] = E::lit(xh) * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                inv_std: inv_stds,
            },
            None,
        ))
    }

    /// `-log softmax(logits)[target]` via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId, NnError> {
        let lv = &self.nodes[logits.0].value;
        let n = lv.len();
        if target >= n {
            return Err(NnError::TargetOutOfRange { target, classes: n });
        }
        let mx = lv
            .data()
            .iter()
            .fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let sum: f64 = lv.data().iter().map(|v| (v.as_f64() - mx).exp()).sum();
        let lse = mx + sum.ln();
        let loss = lse - lv.data()[target].as_f64();
        let probs = lv
            .data()
            .iter()
            .map(|v| E::lit((v.as_f64() - lse).exp()))
            .collect();
        Ok(self.push(
            NdArray::scalar(E::lit(loss)),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            None,
        ))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0]
            .value
            .data()
            .iter()
            .fold(E::zero(), |acc, v| acc + *v);
        self.push(NdArray::scalar(s), Op::SumAll { a }, None)
    }

    /// Select rows by index; duplicate indices are allowed.
    pub fn gather_rows(&mut self, a: TensorId, idx: Rc<Vec<usize>>) -> Result<TensorId, NnError> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(NnError::Invalid {
                op: "gather_rows",
                what: format!("row index {bad} out of range ({r} rows)"),
            });
        }
        let mut out = NdArray::zeros(vec![idx.len(), c]);
        for (i, &src) in idx.iter().enumerate() {
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(av.row(src));
        }
        Ok(self.push(out, Op::GatherRows { a, idx }, None))
    }

    /// Contiguous row slice (a gather over a range).
    pub fn slice_rows(
        &mut self,
        a: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, NnError> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, Rc::new(idx))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, NnError> {
        if parts.is_empty() {
            return Err(NnError::Invalid {
                op: "concat_rows",
                what: "no parts".into(),
            });
        }
        let c = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != c {
                return Err(NnError::DimMismatch {
                    op: "concat_rows",
                    left: self.nodes[parts[0].0].value.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let out = NdArray::from_vec(vec![rows, c], data);
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            None,
        ))
    }

    pub fn slice_cols(
        &mut self,
        a: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, NnError> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        if start + len > c {
            return Err(NnError::Invalid {
                op: "slice_cols",
                what: format!("cols {start}..{} out of range ({c} cols)", start + len),
            });
        }
        let mut out = NdArray::zeros(vec![r, len]);
        for i in 0..r {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&av.row(i)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { a, start, len }, None))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, NnError> {
        if parts.is_empty() {
            return Err(NnError::Invalid {
                op: "concat_cols",
                what: "no parts".into(),
            });
        }
        let r = self.nodes[parts[0].0].value.rows();
        let mut cols = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != r {
                return Err(NnError::DimMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0].0].value.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            cols += v.cols();
        }
        let mut out = NdArray::zeros(vec![r, cols]);
        let mut off = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            let pc = v.cols();
            for i in 0..r {
                out.data_mut()[i * cols + off..i * cols + off + pc].copy_from_slice(v.row(i));
            }
            off += pc;
        }
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            None,
        ))
    }

    /// Per-group elementwise max over rows of `a`. Gradient flows only to
    /// each group's argmax member (first on ties, in member order).
    pub fn group_max_pool(
        &mut self,
        a: TensorId,
        groups: &[Vec<usize>],
    ) -> Result<TensorId, NnError> {
        let av = &self.nodes[a.0].value;
        let (r, c) = (av.rows(), av.cols());
        let g = groups.len();
        let mut out = NdArray::zeros(vec![g, c]);
        let mut argmax = vec![0usize; g * c];
        for (gi, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(NnError::Invalid {
                    op: "group_max_pool",
                    what: format!("group {gi} is empty"),
                });
            }
            if let Some(&bad) = members.iter().find(|&&m| m >= r) {
                return Err(NnError::Invalid {
                    op: "group_max_pool",
                    what: format!("member {bad} out of range ({r} rows)"),
                });
            }
            for d in 0..c {
                let mut best = av.at(members[0], d);
                let mut best_row = members[0];
                for &m in &members[1..] {
                    let v = av.at(m, d);
                    if v > best {
                        best = v;
                        best_row = m;
                    }
                }
                out.data_mut()[gi * c + d] = best;
                argmax[gi * c + d] = best_row;
            }
        }
        Ok(self.push(out, Op::GroupMaxPool { a, argmax }, None))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Propagate gradients from a scalar loss node through the whole record
    /// in reverse execution order. May be called once per forward record.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), NnError> {
        if self.consumed {
            return Err(NnError::GraphConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(NdArray::full(lv.shape().to_vec(), E::one()));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            step_backward(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Fold parameter-leaf gradients back into the store (frozen entries
    /// are left untouched).
    pub fn accumulate_param_grads(&self, ps: &mut ParamStore<E>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, self.grads.get(i).and_then(|g| g.as_ref()))
            {
                ps.accumulate_grad(pid, g);
            }
        }
    }

    /// Parameter gradients as owned pairs, for deterministic cross-thread
    /// merging (one tape per sample, merged in sample order).
    pub fn param_grads(&self) -> Vec<(ParamId, NdArray<E>)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, self.grads.get(i).and_then(|g| g.as_ref()))
            {
                out.push((pid, g.clone()));
            }
        }
        out
    }
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn grad_buf<'a, E: Elem>(
    nodes: &[Node<E>],
    grads: &'a mut [Option<NdArray<E>>],
    t: TensorId,
) -> &'a mut NdArray<E> {
    if grads[t.0].is_none() {
        grads[t.0] = Some(NdArray::zeros(nodes[t.0].value.shape().to_vec()));
    }
    grads[t.0].as_mut().unwrap()
}

fn step_backward<E: Elem>(
    nodes: &[Node<E>],
    grads: &mut [Option<NdArray<E>>],
    node: usize,
    g: &NdArray<E>,
) {
    // Ops reference strictly earlier nodes, so reading values from `nodes`
    // while writing into `grads` never aliases the node being processed.
    match &nodes[node].op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            {
                let da = grad_buf(nodes, grads, *a);
                match (ta, tb) {
                    (false, false) => mm_acc(
                        da.data_mut(),
                        g.data(),
                        g.rows(),
                        g.cols(),
                        false,
                        bv.data(),
                        bv.rows(),
                        bv.cols(),
                        true,
                    ),
                    (false, true) => mm_acc(
                        da.data_mut(),
                        g.data(),
                        g.rows(),
                        g.cols(),
                        false,
                        bv.data(),
                        bv.rows(),
                        bv.cols(),
                        false,
                    ),
                    (true, false) => mm_acc(
                        da.data_mut(),
                        bv.data(),
                        bv.rows(),
                        bv.cols(),
                        false,
                        g.data(),
                        g.rows(),
                        g.cols(),
                        true,
                    ),
                    (true, true) => mm_acc(
                        da.data_mut(),
                        bv.data(),
                        bv.rows(),
                        bv.cols(),
                        true,
                        g.data(),
                        g.rows(),
                        g.cols(),
                        true,
                    ),
                }
            }
            {
                let db = grad_buf(nodes, grads, *b);
                match (ta, tb) {
                    (false, false) => mm_acc(
                        db.data_mut(),
                        av.data(),
                        av.rows(),
                        av.cols(),
                        true,
                        g.data(),
                        g.rows(),
                        g.cols(),
                        false,
                    ),
                    (false, true) => mm_acc(
                        db.data_mut(),
                        g.data(),
                        g.rows(),
                        g.cols(),
                        true,
                        av.data(),
                        av.rows(),
                        av.cols(),
                        false,
                    ),
                    (true, false) => mm_acc(
                        db.data_mut(),
                        av.data(),
                        av.rows(),
                        av.cols(),
                        false,
                        g.data(),
                        g.rows(),
                        g.cols(),
                        false,
                    ),
                    (true, true) => mm_acc(
                        db.data_mut(),
                        g.data(),
                        g.rows(),
                        g.cols(),
                        true,
                        av.data(),
                        av.rows(),
                        av.cols(),
                        true,
                    ),
                }
            }
        }
        Op::Add { a, b } => {
            add_into(grad_buf(nodes, grads, *a), g.data());
            add_into(grad_buf(nodes, grads, *b), g.data());
        }
        Op::AddRow { a, row } => {
            add_into(grad_buf(nodes, grads, *a), g.data());
            let c = g.cols();
            let dr = grad_buf(nodes, grads, *row);
            for (i, v) in g.data().iter().enumerate() {
                dr.data_mut()[i % c] += *v;
            }
        }
        Op::Sub { a, b } => {
            add_into(grad_buf(nodes, grads, *a), g.data());
            let db = grad_buf(nodes, grads, *b);
            for (d, v) in db.data_mut().iter_mut().zip(g.data()) {
                *d -= *v;
            }
        }
        Op::Mul { a, b } => {
            {
                let bv = &nodes[b.0].value;
                let da = grad_buf(nodes, grads, *a);
                for ((d, gv), bvv) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *d += *gv * *bvv;
                }
            }
            {
                let av = &nodes[a.0].value;
                let db = grad_buf(nodes, grads, *b);
                for ((d, gv), avv) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += *gv * *avv;
                }
            }
        }
        Op::Scale { a, k } => {
            let k = E::lit(*k);
            let da = grad_buf(nodes, grads, *a);
            for (d, v) in da.data_mut().iter_mut().zip(g.data()) {
                *d += *v * k;
            }
        }
        Op::Gelu { a } => {
            let av = &nodes[a.0].value;
            let da = grad_buf(nodes, grads, *a);
            for ((d, gv), x) in da.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                *d += *gv * E::lit(gelu_grad_f64(x.as_f64()));
            }
        }
        Op::SoftmaxRows { a } => {
            let p = &nodes[node].value;
            let (r, c) = (p.rows(), p.cols());
            let da = grad_buf(nodes, grads, *a);
            for i in 0..r {
                let prow = p.row(i);
                let grow = &g.data()[i * c..(i + 1) * c];
                let dot = prow
                    .iter()
                    .zip(grow)
                    .fold(E::zero(), |s, (pv, gv)| s + *pv * *gv);
                let drow = &mut da.data_mut()[i * c..(i + 1) * c];
                for j in 0..c {
                    drow[j] += prow[j] * (grow[j] - dot);
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            inv_std,
        } => {
            let xv = &nodes[x.0].value;
            let gv = &nodes[gain.0].value;
            let (r, c) = (xv.rows(), xv.cols());
            let cn = E::lit(c as f64);
            {
                let db = grad_buf(nodes, grads, *bias);
                for i in 0..r {
                    for j in 0..c {
                        db.data_mut()[j] += g.at(i, j);
                    }
                }
            }
            let mut dgain = vec![E::zero(); c];
            let mut dx = vec![E::zero(); r * c];
            let mut xh = vec![E::zero(); c];
            let mut dxh = vec![E::zero(); c];
            for i in 0..r {
                let xrow = xv.row(i);
                let grow = &g.data()[i * c..(i + 1) * c];
                let (m, s) = (mean[i], inv_std[i]);
                let mut sum_dxh = E::zero();
                let mut sum_dxh_xh = E::zero();
                for j in 0..c {
                    xh[j] = (xrow[j] - m) * s;
                    dgain[j] += grow[j] * xh[j];
                    dxh[j] = grow[j] * gv.data()[j];
                    sum_dxh += dxh[j];
                    sum_dxh_xh += dxh[j] * xh[j];
                }
                for j in 0..c {
                    dx[i * c + j] = s * (dxh[j] - sum_dxh / cn - xh[j] * sum_dxh_xh / cn);
                }
            }
            add_into(grad_buf(nodes, grads, *gain), &dgain);
            add_into(grad_buf(nodes, grads, *x), &dx);
        }
        Op::CrossEntropy {
            logits,
            target,
            probs,
        } => {
            let gs = g.item();
            let dl = grad_buf(nodes, grads, *logits);
            for (j, d) in dl.data_mut().iter_mut().enumerate() {
                let onehot = if j == *target { E::one() } else { E::zero() };
                *d += gs * (probs[j] - onehot);
            }
        }
        Op::SumAll { a } => {
            let gs = g.item();
            let da = grad_buf(nodes, grads, *a);
            for d in da.data_mut() {
                *d += gs;
            }
        }
        Op::GatherRows { a, idx } => {
            let c = g.cols();
            let da = grad_buf(nodes, grads, *a);
            for (i, &src) in idx.iter().enumerate() {
                let drow = &mut da.data_mut()[src * c..(src + 1) * c];
                for (d, v) in drow.iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                    *d += *v;
                }
            }
        }
        Op::ConcatRows { parts } => {
            let c = g.cols();
            let mut off = 0;
            for p in parts {
                let dp = grad_buf(nodes, grads, *p);
                let pr = dp.rows();
                add_into(dp, &g.data()[off * c..(off + pr) * c]);
                off += pr;
            }
        }
        Op::SliceCols { a, start, len } => {
            let da = grad_buf(nodes, grads, *a);
            let c = da.cols();
            for i in 0..g.rows() {
                let drow = &mut da.data_mut()[i * c + start..i * c + start + len];
                for (d, v) in drow.iter_mut().zip(&g.data()[i * len..(i + 1) * len]) {
                    *d += *v;
                }
            }
        }
        Op::ConcatCols { parts } => {
            let total = g.cols();
            let r = g.rows();
            let mut off = 0;
            for p in parts {
                let dp = grad_buf(nodes, grads, *p);
                let pc = dp.cols();
                for i in 0..r {
                    let drow = &mut dp.data_mut()[i * pc..(i + 1) * pc];
                    for (j, d) in drow.iter_mut().enumerate() {
                        *d += g.data()[i * total + off + j];
                    }
                }
                off += pc;
            }
        }
        Op::GroupMaxPool { a, argmax } => {
            let c = g.cols();
            let da = grad_buf(nodes, grads, *a);
            for (flat, &src_row) in argmax.iter().enumerate() {
                let d = flat % c;
                da.data_mut()[src_row * c + d] += g.data()[flat];
            }
        }
    }
}

fn logical_dims<E: Elem>(a: &NdArray<E>, t: bool) -> (usize, usize) {
    if t {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    }
}

fn add_into<E: Elem>(dst: &mut NdArray<E>, src: &[E]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += *s;
    }
}

/// `c += opA · opB` where each operand is optionally transposed.
/// Loop order is chosen per case so the inner walk is contiguous.
fn mm_acc<E: Elem>(
    c: &mut [E],
    a: &[E],
    ar: usize,
    ac: usize,
    ta: bool,
    b: &[E],
    br: usize,
    bc: usize,
    tb: bool,
) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    debug_assert_eq!(if tb { bc } else { br }, k);
    debug_assert_eq!(c.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let arow = &a[i * ac..(i + 1) * ac];
                let crow = &mut c[i * n..(i + 1) * n];
                for (kk, &av) in arow.iter().enumerate() {
                    let brow = &b[kk * bc..(kk + 1) * bc];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * ac..(i + 1) * ac];
                let crow = &mut c[i * n..(i + 1) * n];
                for (j, cv) in crow.iter_mut().enumerate() {
                    let brow = &b[j * bc..(j + 1) * bc];
                    let mut s = E::zero();
                    for (&av, &bv) in arow.iter().zip(brow) {
                        s += av * bv;
                    }
                    *cv += s;
                }
            }
        }
        (true, false) => {
            for kk in 0..k {
                let arow = &a[kk * ac..(kk + 1) * ac];
                let brow = &b[kk * bc..(kk + 1) * bc];
                for (i, &av) in arow.iter().enumerate() {
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = E::zero();
                    for kk in 0..k {
                        s += a[kk * ac + i] * b[j * bc + kk];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}


#[cfg(test)]
impl Tape<f64> {
    /// Test helper: view a 1D leaf of length rows*cols as a [rows x cols]
    /// matrix while keeping gradient flow (column slices stacked as rows).
    fn gather_rows_reshape(&mut self, x: TensorId, rows: usize, cols: usize) -> TensorId {
        assert_eq!(self.value(x).len(), rows * cols);
        let mut parts = Vec::new();
        for r in 0..rows {
            parts.push(self.slice_cols(x, r * cols, cols).unwrap());
        }
        self.concat_rows(&parts).unwrap()
    }
}
