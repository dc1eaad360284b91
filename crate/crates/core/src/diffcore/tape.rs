//! Per-forward-pass tape for reverse-mode differentiation.
//!
//! Every primitive records its inputs and whatever it needs for the backward
//! sweep. `backward` walks the tape once in reverse creation order.

use std::collections::HashMap;

use super::array::{self, matmul, matmul_nt, matmul_tn, sigmoid_scalar, softplus_scalar, DenseArray};
use super::params::{ParamGrads, ParamStore};
use crate::dtwpool::softdtw::{soft_dtw_backward, soft_dtw_table, sq_euclidean_cost};
use crate::error::{Error, Result};
use crate::gaussian_graph::{pairwise_kl, pairwise_kl_backward};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, DenseArray),
    Relu(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    RowSoftmax(NodeId),
    RowNormalize(NodeId),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    Submatrix(NodeId, Vec<usize>, Vec<usize>),
    Pick(Vec<(NodeId, usize)>),
    MulRows(NodeId, NodeId),
    ColMax(NodeId, Vec<usize>),
    PairwiseKl(NodeId, NodeId),
    SoftDtw {
        x: NodeId,
        y: NodeId,
        gamma: f64,
        table: DenseArray,
        cost: DenseArray,
    },
    CrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    Sum(NodeId),
}

struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    bound: HashMap<usize, NodeId>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    /// A tape with no parameter store; only constants and variables.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: DenseArray, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn unary(&mut self, x: NodeId, value: DenseArray, op: Op) -> NodeId {
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (for checking primitives).
    pub fn variable(&mut self, value: DenseArray) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter from the store. Repeated binds share one node.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let store = self
            .store
            .ok_or_else(|| Error::Internal("tape has no parameter store".into()))?;
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if let Some(&id) = self.bound.get(&idx) {
            return Ok(id);
        }
        let id = self.push(store.entry(idx).value.clone(), Op::Param, true);
        self.bound.insert(idx, id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::MatMulNt(a, b), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(b);
        if xv.cols() != bv.len() {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(bv.values()) {
                *o += bb;
            }
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let mut v = self.value(x).clone();
        v.scale_assign(factor);
        self.unary(x, v, Op::Scale(x, factor))
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&mut self, x: NodeId, mask: DenseArray) -> Result<NodeId> {
        if self.shape(x) != mask.shape() {
            return Err(Error::dim("mul_const", self.shape(x), mask.shape()));
        }
        let mut v = self.value(x).clone();
        for (a, b) in v.values_mut().iter_mut().zip(mask.values()) {
            *a *= b;
        }
        Ok(self.unary(x, v, Op::MulConst(x, mask)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.unary(x, v, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(softplus_scalar);
        self.unary(x, v, Op::Softplus(x))
    }

    pub fn row_softmax(&mut self, x: NodeId) -> NodeId {
        let v = array::row_softmax(self.value(x));
        self.unary(x, v, Op::RowSoftmax(x))
    }

    /// Divides each row by its sum. Rows must have non-zero sums.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let s: f64 = row.iter().sum();
            if s == 0.0 || !s.is_finite() {
                return Err(Error::Numeric(format!("row {r} sums to {s}")));
            }
            row.iter_mut().for_each(|a| *a /= s);
        }
        Ok(self.unary(x, v, Op::RowNormalize(x)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero arrays".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(Error::dim("concat_cols", self.shape(*first), v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            DenseArray::matrix(rows, cols, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= xv.rows() {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: r,
                    limit: xv.rows(),
                });
            }
            out.extend_from_slice(xv.row(r));
        }
        let v = DenseArray::matrix(rows.len(), cols, out)?;
        Ok(self.unary(x, v, Op::GatherRows(x, rows.to_vec())))
    }

    pub fn submatrix(&mut self, x: NodeId, rows: &[usize], cols: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        for (&i, limit) in rows.iter().map(|i| (i, xv.rows())).chain(cols.iter().map(|j| (j, xv.cols()))) {
            if i >= limit {
                return Err(Error::Index {
                    what: "submatrix",
                    index: i,
                    limit,
                });
            }
        }
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            for &j in cols {
                out.push(xv.get(i, j));
            }
        }
        let v = DenseArray::matrix(rows.len(), cols.len(), out)?;
        Ok(self.unary(x, v, Op::Submatrix(x, rows.to_vec(), cols.to_vec())))
    }

    /// Column vector whose entry `k` copies flat element `sources[k].1` of `sources[k].0`.
    pub fn pick(&mut self, sources: &[(NodeId, usize)]) -> Result<NodeId> {
        let mut out = Vec::with_capacity(sources.len());
        for &(id, flat) in sources {
            let v = self.value(id);
            if flat >= v.len() {
                return Err(Error::Index {
                    what: "pick",
                    index: flat,
                    limit: v.len(),
                });
            }
            out.push(v.values()[flat]);
        }
        let ids: Vec<NodeId> = sources.iter().map(|s| s.0).collect();
        let rg = self.any_grad(&ids);
        Ok(self.push(
            DenseArray::matrix(sources.len(), 1, out)?,
            Op::Pick(sources.to_vec()),
            rg,
        ))
    }

    /// Scales row `i` of `x` by `gate[i]` (`gate` is `rows x 1`).
    pub fn mul_rows(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let gv = self.value(gate);
        if gv.len() != xv.rows() {
            return Err(Error::dim("mul_rows", xv.shape(), gv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let g = gv.values()[r];
            out.row_mut(r).iter_mut().for_each(|a| *a *= g);
        }
        let rg = self.any_grad(&[x, gate]);
        Ok(self.push(out, Op::MulRows(x, gate), rg))
    }

    /// Coordinatewise max over rows, giving a `1 x cols` row. Ties pick the first row.
    pub fn col_max(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::Argument("max over zero rows".into()));
        }
        let cols = xv.cols();
        let mut best = xv.row(0).to_vec();
        let mut arg = vec![0usize; cols];
        for r in 1..xv.rows() {
            for (c, &v) in xv.row(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    arg[c] = r;
                }
            }
        }
        let v = DenseArray::matrix(1, cols, best)?;
        Ok(self.unary(x, v, Op::ColMax(x, arg)))
    }

    /// `T x T` matrix of `KL(node i || node j)` for diagonal Gaussians.
    pub fn pairwise_kl(&mut self, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
        let v = pairwise_kl(self.value(mu), self.value(sigma))?;
        let rg = self.any_grad(&[mu, sigma]);
        Ok(self.push(v, Op::PairwiseKl(mu, sigma), rg))
    }

    /// Soft-DTW between row sequences `x` and `y` under squared Euclidean cost.
    pub fn soft_dtw(&mut self, x: NodeId, y: NodeId, gamma: f64) -> Result<NodeId> {
        let cost = sq_euclidean_cost(self.value(x), self.value(y))?;
        let table = soft_dtw_table(&cost, gamma)?;
        let (m, n) = (cost.rows(), cost.cols());
        let value = table.get(m, n);
        let rg = self.any_grad(&[x, y]);
        Ok(self.push(
            DenseArray::scalar(value),
            Op::SoftDtw {
                x,
                y,
                gamma,
                table,
                cost,
            },
            rg,
        ))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let lv = self.value(logits);
        let k = lv.len();
        if label >= k {
            return Err(Error::Index {
                what: "cross_entropy label",
                index: label,
                limit: k,
            });
        }
        let lse = array::log_sum_exp(lv.values());
        let probs: Vec<f64> = lv.values().iter().map(|&z| (z - lse).exp()).collect();
        let loss = lse - lv.values()[label];
        Ok(self.unary(
            logits,
            DenseArray::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.unary(x, DenseArray::scalar(s), Op::Sum(x))
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::dim("backward", out.value.shape(), &[1]));
        }
        let mut grads: Vec<Option<DenseArray>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(DenseArray::filled(out.value.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { nodes: grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &DenseArray, grads: &mut [Option<DenseArray>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, matmul_nt(g, self.value(*b))?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, matmul_tn(self.value(*a), g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, matmul(g, self.value(*b))?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, matmul_tn(g, self.value(*a))?);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let mut gb = DenseArray::zeros(self.shape(*b));
                    for r in 0..g.rows() {
                        for (acc, &v) in gb.values_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.wants(*id) {
                        accumulate(grads, *id, g.clone());
                    }
                }
            }
            Op::Scale(x, f) => {
                let mut gx = g.clone();
                gx.scale_assign(*f);
                accumulate(grads, *x, gx);
            }
            Op::MulConst(x, mask) => {
                let mut gx = g.clone();
                for (a, b) in gx.values_mut().iter_mut().zip(mask.values()) {
                    *a *= b;
                }
                accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (a, &v) in gx.values_mut().iter_mut().zip(xv.values()) {
                    if v <= 0.0 {
                        *a = 0.0;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let mut gx = g.clone();
                for (a, &y) in gx.values_mut().iter_mut().zip(node.value.values()) {
                    *a *= 1.0 - y * y;
                }
                accumulate(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let mut gx = g.clone();
                for (a, &v) in gx.values_mut().iter_mut().zip(self.value(*x).values()) {
                    *a *= sigmoid_scalar(v);
                }
                accumulate(grads, *x, gx);
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (a, &yy) in gx.row_mut(r).iter_mut().zip(yr) {
                        *a = yy * (*a - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::RowNormalize(x) => {
                let y = &node.value;
                let xv = self.value(*x);
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let s: f64 = xv.row(r).iter().sum();
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    gx.row_mut(r).iter_mut().for_each(|a| *a = (*a - dot) / s);
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    if self.wants(*p) {
                        let mut gp = DenseArray::zeros(pv.shape());
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        accumulate(grads, *p, gp);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(x, rows) => {
                let mut gx = DenseArray::zeros(self.shape(*x));
                for (k, &r) in rows.iter().enumerate() {
                    for (a, &b) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *a += b;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Submatrix(x, rows, cols) => {
                let mut gx = DenseArray::zeros(self.shape(*x));
                for (a, &i) in rows.iter().enumerate() {
                    for (b, &j) in cols.iter().enumerate() {
                        let cur = gx.get(i, j);
                        gx.set(i, j, cur + g.get(a, b));
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Pick(sources) => {
                for (k, &(id, flat)) in sources.iter().enumerate() {
                    if self.wants(id) {
                        let mut gx = DenseArray::zeros(self.shape(id));
                        gx.values_mut()[flat] = g.values()[k];
                        accumulate(grads, id, gx);
                    }
                }
            }
            Op::MulRows(x, gate) => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        let s = gv.values()[r];
                        gx.row_mut(r).iter_mut().for_each(|a| *a *= s);
                    }
                    accumulate(grads, *x, gx);
                }
                if self.wants(*gate) {
                    let mut gg = DenseArray::zeros(gv.shape());
                    for r in 0..xv.rows() {
                        gg.values_mut()[r] = g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                    }
                    accumulate(grads, *gate, gg);
                }
            }
            Op::ColMax(x, arg) => {
                let mut gx = DenseArray::zeros(self.shape(*x));
                for (c, &r) in arg.iter().enumerate() {
                    gx.set(r, c, g.values()[c]);
                }
                accumulate(grads, *x, gx);
            }
            Op::PairwiseKl(mu, sigma) => {
                let (gm, gs) = pairwise_kl_backward(self.value(*mu), self.value(*sigma), g)?;
                if self.wants(*mu) {
                    accumulate(grads, *mu, gm);
                }
                if self.wants(*sigma) {
                    accumulate(grads, *sigma, gs);
                }
            }
            Op::SoftDtw {
                x,
                y,
                gamma,
                table,
                cost,
            } => {
                let align = soft_dtw_backward(cost, table, *gamma);
                let upstream = g.values()[0];
                let xv = self.value(*x);
                let yv = self.value(*y);
                let mut gx = DenseArray::zeros(xv.shape());
                let mut gy = DenseArray::zeros(yv.shape());
                for i in 0..xv.rows() {
                    for j in 0..yv.rows() {
                        let e = align.get(i, j) * upstream;
                        if e == 0.0 {
                            continue;
                        }
                        for k in 0..xv.cols() {
                            let diff = 2.0 * e * (xv.get(i, k) - yv.get(j, k));
                            gx.values_mut()[i * xv.cols() + k] += diff;
                            gy.values_mut()[j * yv.cols() + k] -= diff;
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, gx);
                }
                if self.wants(*y) {
                    accumulate(grads, *y, gy);
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let upstream = g.values()[0];
                let mut gl = DenseArray::zeros(self.shape(*logits));
                for (k, (a, &p)) in gl.values_mut().iter_mut().zip(probs).enumerate() {
                    *a = upstream * (p - if k == *label { 1.0 } else { 0.0 });
                }
                accumulate(grads, *logits, gl);
            }
            Op::Sum(x) => {
                accumulate(grads, *x, DenseArray::filled(self.shape(*x), g.values()[0]));
            }
        }
        Ok(())
    }

    /// Gradients of the bound parameters, aligned with the store.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let count = self.store.map(|s| s.len()).unwrap_or(0);
        let mut out = vec![None; count];
        for (&idx, &id) in &self.bound {
            out[idx] = Some(
                grads
                    .wrt(id)
                    .cloned()
                    .unwrap_or_else(|| DenseArray::zeros(self.shape(id))),
            );
        }
        ParamGrads(out)
    }
}

fn accumulate(grads: &mut [Option<DenseArray>], id: NodeId, delta: DenseArray) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

pub struct Gradients {
    nodes: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&DenseArray> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }
}
