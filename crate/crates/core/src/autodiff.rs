//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Tape::backward`] walks it in reverse. Gradients
//! flowing into a node from several consumers are summed.
//!
//! Leaves are either parameters (tagged with a [`ParamId`], gradients
//! reported in the [`GradStore`]) or constants (no gradient). Any node whose
//! inputs are all constants is itself constant and is skipped on the way
//! back, so a frozen teacher recorded on the same tape costs nothing in
//! backward.
//!
//! Softmax followed by KL divergence and softmax followed by cross entropy
//! are fused into single primitives so their gradients are the stable
//! `q - p` form.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kronecker::{kron_backward_parts, kron_matmul_parts};
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, layernorm_with_stats, log_softmax_row, matmul, matmul_nt,
    matmul_tn, softmax_in_place, LayerNormStats, Matrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a trainable parameter across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Argument order of the attention KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum KlDirection {
    /// `KL(teacher || student)`.
    #[default]
    TeacherStudent,
    /// `KL(student || teacher)`.
    StudentTeacher,
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulNt(NodeId, NodeId),
    /// `x (A ⊗ B)^T`, row by row.
    KronMatMul {
        x: NodeId,
        a: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    AddRow {
        x: NodeId,
        bias: NodeId,
    },
    Scale(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        stats: LayerNormStats,
    },
    Gelu(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Rows `A[id] ⊗ B` with `B` a single row.
    KronGather {
        a: NodeId,
        b: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    Softmax(NodeId),
    CausalSoftmax(NodeId),
    Sum(NodeId),
    Mse(NodeId, NodeId),
    /// Fused causal softmax + KL against a constant distribution.
    AttentionKl {
        scores: NodeId,
        target: Matrix,
        student: Matrix,
        direction: KlDirection,
    },
    /// Fused softmax + mean negative log-likelihood.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Matrix,
    },
    WeightedSum(Vec<(NodeId, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    params: BTreeMap<ParamId, Matrix>,
    nodes: Vec<Option<Matrix>>,
}

impl GradStore {
    /// Gradient of a parameter, if the loss depends on it.
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    /// Gradient with respect to any differentiable node.
    pub fn node(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Matrix> {
        self.params
    }
}

fn shape_err(op: &'static str, lhs: &Matrix, rhs: &Matrix) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape(),
        rhs: rhs.shape(),
    }
}

fn causal_softmax(scores: &Matrix) -> Result<Matrix> {
    if scores.rows() != scores.cols() {
        return Err(shape_err("causal_softmax", scores, scores));
    }
    let t = scores.rows();
    let mut out = Matrix::zeros(t, t);
    for i in 0..t {
        let row = &mut out.row_mut(i)[..=i];
        row.copy_from_slice(&scores.row(i)[..=i]);
        softmax_in_place(row);
    }
    Ok(out)
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.get(0, 0)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf(Some(id)), true)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf(None), false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), g))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMulNt(a, b), g))
    }

    /// `x (A ⊗ B)^T` without materializing the product.
    pub fn kron_matmul(&mut self, x: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kron_matmul_parts(self.value(a), self.value(b), self.value(x))?;
        let g = self.needs(x) || self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::KronMatMul { x, a, b }, g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    /// Add a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let b = self.value(bias);
        if b.rows() != 1 {
            return Err(shape_err("add_row", self.value(x), b));
        }
        let v = self.value(x).add_row_vector(b.as_slice())?;
        let g = self.needs(x) || self.needs(bias);
        Ok(self.push(v, Op::AddRow { x, bias }, g))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).scale(c);
        let g = self.needs(x);
        self.push(v, Op::Scale(x, c), g)
    }

    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (v, stats) = layernorm_with_stats(
            self.value(x),
            self.value(gain).as_slice(),
            self.value(bias).as_slice(),
            eps,
        )?;
        let g = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            g,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu_scalar);
        let g = self.needs(x);
        self.push(v, Op::Gelu(x), g)
    }

    /// Rows `table[ids[t]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if ids.is_empty() {
            return Err(Error::Empty("gather ids"));
        }
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: t.rows(),
                });
            }
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        let g = self.needs(table);
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// Rows `A[ids[t]] ⊗ B` for a single-row `B`.
    pub fn kron_gather(&mut self, a: NodeId, b: NodeId, ids: &[usize]) -> Result<NodeId> {
        let e =
            crate::layers::KroneckerEmbedding::new(self.value(a).clone(), self.value(b).clone())?;
        let v = crate::layers::embed_lookup(&e, ids)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(
            v,
            Op::KronGather {
                a,
                b,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_cols(start, len)?;
        let g = self.needs(x);
        Ok(self.push(v, Op::SliceCols { x, start }, g))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let m = self.value(x);
        if len == 0 || start + len > m.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: m.shape(),
                rhs: (start, len),
            });
        }
        let data = m.as_slice()[start * m.cols()..(start + len) * m.cols()].to_vec();
        let v = Matrix::new(len, m.cols(), data)?;
        let g = self.needs(x);
        Ok(self.push(v, Op::SliceRows { x, start }, g))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<Matrix> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Matrix::concat_cols(&mats)?;
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.value(x).reshape(rows, cols)?;
        let g = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), g))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = crate::tensor::softmax_rows(self.value(x));
        let g = self.needs(x);
        self.push(v, Op::Softmax(x), g)
    }

    /// Row-wise softmax over positions `j <= i` of a square score matrix;
    /// entries above the diagonal are exactly zero.
    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = causal_softmax(self.value(x))?;
        let g = self.needs(x);
        Ok(self.push(v, Op::CausalSoftmax(x), g))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(x).sum());
        let g = self.needs(x);
        self.push(v, Op::Sum(x), g)
    }

    /// Mean squared difference over all entries.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mse", va, vb));
        }
        let n = va.len() as f64;
        let s: f64 = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Matrix::filled(1, 1, s / n), Op::Mse(a, b), g))
    }

    /// KL divergence between a constant causal attention matrix `target`
    /// and `causal_softmax(scores)`, averaged over rows. Only positions
    /// `j <= i` take part.
    pub fn attention_kl(
        &mut self,
        scores: NodeId,
        target: &Matrix,
        direction: KlDirection,
    ) -> Result<NodeId> {
        let s = self.value(scores);
        if s.shape() != target.shape() {
            return Err(shape_err("attention_kl", s, target));
        }
        let q = causal_softmax(s)?;
        let t = s.rows();
        let mut total = 0.0;
        for i in 0..t {
            let (p, qr) = (&target.row(i)[..=i], &q.row(i)[..=i]);
            total += match direction {
                KlDirection::TeacherStudent => kl_row(p, qr),
                KlDirection::StudentTeacher => kl_row(qr, p),
            };
        }
        let g = self.needs(scores);
        Ok(self.push(
            Matrix::filled(1, 1, total / t as f64),
            Op::AttentionKl {
                scores,
                target: target.clone(),
                student: q,
                direction,
            },
            g,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let l = self.value(logits);
        if targets.len() != l.rows() {
            return Err(Error::Length {
                op: "cross_entropy targets",
                expected: l.rows(),
                got: targets.len(),
            });
        }
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= l.cols() {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab: l.cols(),
                });
            }
            let ls = log_softmax_row(l.row(r));
            total -= ls[t];
            for (p, x) in probs.row_mut(r).iter_mut().zip(&ls) {
                *p = x.exp();
            }
        }
        let n = l.rows() as f64;
        let g = self.needs(logits);
        Ok(self.push(
            Matrix::filled(1, 1, total / n),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// `Σ c_i x_i` over `1 x 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut s = 0.0;
        for &(id, c) in terms {
            let v = self.value(id);
            if v.shape() != (1, 1) {
                return Err(Error::NonScalarLoss {
                    rows: v.rows(),
                    cols: v.cols(),
                });
            }
            s += c * v.get(0, 0);
        }
        let g = terms.iter().any(|&(id, _)| self.needs(id));
        Ok(self.push(Matrix::filled(1, 1, s), Op::WeightedSum(terms.to_vec()), g))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter
    /// and differentiable node it depends on.
    pub fn backward(&self, loss: NodeId) -> Result<GradStore> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        let mut params = BTreeMap::new();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if let Op::Leaf(Some(pid)) = node.op {
                match params.get_mut(&pid) {
                    None => {
                        params.insert(pid, g.clone());
                    }
                    Some(acc) => Matrix::add_assign(acc, &g)?,
                }
            }
            grads[i] = Some(g);
        }
        Ok(GradStore {
            params,
            nodes: grads,
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |id: NodeId, m: Matrix| -> Result<()> {
            if !self.needs(id) {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&m),
                slot => {
                    *slot = Some(m);
                    Ok(())
                }
            }
        };
        let val = |id: NodeId| self.value(id);
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, matmul_nt(g, val(*b))?)?;
                }
                if self.needs(*b) {
                    acc(*b, matmul_tn(val(*a), g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    acc(*a, matmul(g, val(*b))?)?;
                }
                if self.needs(*b) {
                    acc(*b, matmul_tn(g, val(*a))?)?;
                }
            }
            Op::KronMatMul { x, a, b } => {
                let (ga, gb, gx) = kron_backward_parts(val(*a), val(*b), val(*x), g)?;
                acc(*a, ga)?;
                acc(*b, gb)?;
                acc(*x, gx)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::AddRow { x, bias } => {
                acc(*x, g.clone())?;
                if self.needs(*bias) {
                    acc(*bias, Matrix::row_vector(&g.column_sums()))?;
                }
            }
            Op::Scale(x, c) => acc(*x, g.scale(*c))?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let gamma = val(*gain).as_slice();
                let xhat = &stats.normalized;
                let (rows, cols) = xhat.shape();
                if self.needs(*gain) {
                    acc(*gain, Matrix::row_vector(&g.hadamard(xhat)?.column_sums()))?;
                }
                if self.needs(*bias) {
                    acc(*bias, Matrix::row_vector(&g.column_sums()))?;
                }
                if self.needs(*x) {
                    let n = cols as f64;
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let gh: Vec<f64> = gr.iter().zip(gamma).map(|(a, b)| a * b).collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghx: f64 = gh.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let is = stats.inv_std[r];
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = is / n * (n * gh[j] - sum_gh - xr[j] * sum_ghx);
                        }
                    }
                    acc(*x, gx)?;
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                let mut gx = g.clone();
                for (o, &xi) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    *o *= gelu_grad_scalar(xi);
                }
                acc(*x, gx)?;
            }
            Op::Gather { table, ids } => {
                let t = val(*table);
                let mut gt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &gv) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                acc(*table, gt)?;
            }
            Op::KronGather { a, b, ids } => {
                let (av, bv) = (val(*a), val(*b));
                let f = bv.cols();
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gb = vec![0.0; f];
                for (r, &id) in ids.iter().enumerate() {
                    let gr = g.row(r);
                    let arow = av.row(id).to_vec();
                    let garow = ga.row_mut(id);
                    for k in 0..arow.len() {
                        let chunk = &gr[k * f..(k + 1) * f];
                        garow[k] += crate::tensor::dot(chunk, bv.row(0));
                        for (o, &c) in gb.iter_mut().zip(chunk) {
                            *o += c * arow[k];
                        }
                    }
                }
                acc(*a, ga)?;
                acc(*b, Matrix::row_vector(&gb))?;
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, gx)?;
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*x, gx)?;
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.needs(p) {
                        acc(p, g.slice_cols(off, w)?)?;
                    }
                    off += w;
                }
            }
            Op::Reshape(x) => {
                let (r, c) = val(*x).shape();
                acc(*x, g.reshape(r, c)?)?;
            }
            Op::Softmax(x) | Op::CausalSoftmax(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = crate::tensor::dot(yr, gr);
                    for (o, (&yv, &gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - inner);
                    }
                }
                acc(*x, gx)?;
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                acc(*x, Matrix::filled(r, c, g.get(0, 0)))?;
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let c = 2.0 * g.get(0, 0) / va.len() as f64;
                let d = va.sub(vb)?.scale(c);
                if self.needs(*b) {
                    acc(*b, d.scale(-1.0))?;
                }
                acc(*a, d)?;
            }
            Op::AttentionKl {
                scores,
                target,
                student,
                direction,
            } => {
                let t = student.rows();
                let c = g.get(0, 0) / t as f64;
                let mut gs = Matrix::zeros(t, t);
                for i in 0..t {
                    let (p, q) = (&target.row(i)[..=i], &student.row(i)[..=i]);
                    let out = &mut gs.row_mut(i)[..=i];
                    match direction {
                        KlDirection::TeacherStudent => {
                            // d/ds KL(p || softmax(s)) = (Σp) q - p
                            let mass: f64 = p.iter().sum();
                            for j in 0..=i {
                                out[j] = c * (mass * q[j] - p[j]);
                            }
                        }
                        KlDirection::StudentTeacher => {
                            let logr: Vec<f64> = q
                                .iter()
                                .zip(p)
                                .map(|(&qj, &pj)| {
                                    if qj > 0.0 {
                                        qj.ln() - pj.max(f64::MIN_POSITIVE).ln()
                                    } else {
                                        0.0
                                    }
                                })
                                .collect();
                            let mean: f64 = q.iter().zip(&logr).map(|(a, b)| a * b).sum();
                            for j in 0..=i {
                                out[j] = c * q[j] * (logr[j] - mean);
                            }
                        }
                    }
                }
                acc(*scores, gs)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = g.get(0, 0) / targets.len() as f64;
                let mut gl = probs.scale(c);
                for (r, &t) in targets.iter().enumerate() {
                    let v = gl.get(r, t);
                    gl.set(r, t, v - c);
                }
                acc(*logits, gl)?;
            }
            Op::WeightedSum(terms) => {
                for &(id, c) in terms {
                    acc(id, Matrix::filled(1, 1, c * g.get(0, 0)))?;
                }
            }
        }
        Ok(())
    }
}

/// `Σ_j p_j ln(p_j / q_j)` with `0 ln 0 = 0`.
pub fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pj, _)| pj > 0.0)
        .map(|(&pj, &qj)| pj * (pj / qj).ln())
        .sum()
}
