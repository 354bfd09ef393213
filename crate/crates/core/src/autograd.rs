//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] (no copies), constants are owned by the tape.
//! [`Graph::backward`] accepts several seeds at once, which lets a caller
//! splice gradients computed on another tape into this one.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::tensor::{dot, Matrix};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Per-parameter gradient accumulator, indexed like the owning [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Self { grads: vec![None; num_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.frobenius_sq()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Gelu(usize),
    NormalizeRows { x: usize, norms: Vec<f64> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    Gather { table: usize, ids: Vec<usize> },
    MeanRows(usize),
    SumAll(usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Matrix },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store;
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf);
        self.param_vars.insert(id, v);
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Cow::Owned(out), Op::MatMul(a.0, b.0))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(Cow::Owned(out), Op::MatMulT(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shapes");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(Cow::Owned(out), Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(Cow::Owned(out), Op::Mul(a.0, b.0))
    }

    /// Adds the `[1 × n]` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(r));
        assert_eq!((1, va.cols()), vr.shape(), "add_row shapes");
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(vr.as_slice()) {
                *o += b;
            }
        }
        self.push(Cow::Owned(out), Op::AddRow(a.0, r.0))
    }

    /// Multiplies every row of `a` elementwise by the `[1 × n]` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(r));
        assert_eq!((1, va.cols()), vr.shape(), "mul_row shapes");
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(vr.as_slice()) {
                *o *= b;
            }
        }
        self.push(Cow::Owned(out), Op::MulRow(a.0, r.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        self.push(Cow::Owned(out), Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(Cow::Owned(out), Op::AddScalar(a.0))
    }

    /// Row-wise softmax. Entries equal to `-inf` receive zero weight.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(Cow::Owned(out), Op::Softmax(a.0))
    }

    /// Row-wise standardisation without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols() as f64;
        let mut out = va.clone();
        let mut inv_std = Vec::with_capacity(va.rows());
        for i in 0..va.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(Cow::Owned(out), Op::LayerNorm { x: a.0, inv_std })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(Cow::Owned(out), Op::Gelu(a.0))
    }

    /// Scales each row to unit Euclidean norm. The caller guarantees non-zero rows.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = dot(row, row).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        self.push(Cow::Owned(out), Op::NormalizeRows { x: a.0, norms })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_rows(&values);
        self.push(Cow::Owned(out), Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = values.first().map_or(0, |m| m.rows());
        let cols: usize = values.iter().map(|m| m.cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for m in &values {
                assert_eq!(m.rows(), rows, "concat_cols heights");
                out.row_mut(r)[c0..c0 + m.cols()].copy_from_slice(m.row(r));
                c0 += m.cols();
            }
        }
        self.push(Cow::Owned(out), Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(Cow::Owned(out), Op::SliceRows { x: a.0, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "column slice out of range");
        let mut out = Matrix::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(Cow::Owned(out), Op::SliceCols { x: a.0, start })
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let mut out = Matrix::zeros(ids.len(), vt.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(vt.row(id));
        }
        self.push(Cow::Owned(out), Op::Gather { table: table.0, ids: ids.to_vec() })
    }

    /// `[1 × n]` mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Matrix::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, v) in out.as_mut_slice().iter_mut().zip(va.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / va.rows() as f64;
        let out = out.scaled(inv);
        self.push(Cow::Owned(out), Op::MeanRows(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(Cow::Owned(out), Op::SumAll(a.0))
    }

    /// Mean softmax cross-entropy of `[B × C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), labels.len(), "one label per logit row");
        let probs = softmax_rows(vl);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = vl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let out = Matrix::scalar(loss / labels.len() as f64);
        self.push(
            Cow::Owned(out),
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
        )
    }

    /// Reverse sweep. Each seed is `(node, ∂L/∂node)`; seeds on the same node add.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Backprop {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape");
            accumulate(&mut grads, v.0, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Backprop { grads }
    }

    fn backprop_node(&self, node: &Node<'a>, gy: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |i: usize| -> &Matrix { &self.nodes[i].value };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, gy.matmul_t(val(*b)));
                accumulate(grads, *b, val(*a).t_matmul(gy));
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, gy.matmul(val(*b)));
                accumulate(grads, *b, gy.t_matmul(val(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga: Vec<f64> = gy.as_slice().iter().zip(vb.as_slice()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = gy.as_slice().iter().zip(va.as_slice()).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, Matrix::from_vec(va.rows(), va.cols(), ga).unwrap());
                accumulate(grads, *b, Matrix::from_vec(vb.rows(), vb.cols(), gb).unwrap());
            }
            Op::AddRow(a, r) => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *r, column_sums(gy));
            }
            Op::MulRow(a, r) => {
                let (va, vr) = (val(*a), val(*r));
                let mut ga = gy.clone();
                let mut gr = Matrix::zeros(1, vr.cols());
                for i in 0..gy.rows() {
                    let xa = va.row(i);
                    for (j, g) in ga.row_mut(i).iter_mut().enumerate() {
                        gr.as_mut_slice()[j] += *g * xa[j];
                        *g *= vr.as_slice()[j];
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *r, gr);
            }
            Op::Scale(a, s) => accumulate(grads, *a, gy.scaled(*s)),
            Op::AddScalar(a) => accumulate(grads, *a, gy.clone()),
            Op::Softmax(a) => {
                let y = &node.value;
                let mut gx = gy.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let s = dot(gy.row(i), yr);
                    for (g, &p) in gx.row_mut(i).iter_mut().zip(yr) {
                        *g = p * (*g - s);
                    }
                }
                accumulate(grads, *a, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let xhat = &node.value;
                let n = xhat.cols() as f64;
                let mut gx = gy.clone();
                for i in 0..xhat.rows() {
                    let xr = xhat.row(i);
                    let gr = gy.row(i);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gx = dot(gr, xr) / n;
                    for (j, g) in gx.row_mut(i).iter_mut().enumerate() {
                        *g = inv_std[i] * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Gelu(a) => {
                let xa = val(*a);
                let data = gy.as_slice().iter().zip(xa.as_slice()).map(|(g, &x)| g * gelu_grad(x)).collect();
                accumulate(grads, *a, Matrix::from_vec(xa.rows(), xa.cols(), data).unwrap());
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = gy.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let s = dot(gy.row(i), yr);
                    for (g, &p) in gx.row_mut(i).iter_mut().zip(yr) {
                        *g = (*g - p * s) / norms[i];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    accumulate(grads, p, gy.slice_rows(r0, rows));
                    r0 += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (rows, cols) = val(p).shape();
                    let mut g = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        g.row_mut(r).copy_from_slice(&gy.row(r)[c0..c0 + cols]);
                    }
                    accumulate(grads, p, g);
                    c0 += cols;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = val(*x);
                let mut g = Matrix::zeros(vx.rows(), vx.cols());
                for r in 0..gy.rows() {
                    g.row_mut(start + r).copy_from_slice(gy.row(r));
                }
                accumulate(grads, *x, g);
            }
            Op::SliceCols { x, start } => {
                let vx = val(*x);
                let mut g = Matrix::zeros(vx.rows(), vx.cols());
                for r in 0..gy.rows() {
                    g.row_mut(r)[*start..start + gy.cols()].copy_from_slice(gy.row(r));
                }
                accumulate(grads, *x, g);
            }
            Op::Gather { table, ids } => {
                let vt = val(*table);
                let mut g = Matrix::zeros(vt.rows(), vt.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in g.row_mut(id).iter_mut().zip(gy.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, g);
            }
            Op::MeanRows(a) => {
                let rows = val(*a).rows();
                let inv = 1.0 / rows as f64;
                let mut g = Matrix::zeros(rows, gy.cols());
                for r in 0..rows {
                    for (o, v) in g.row_mut(r).iter_mut().zip(gy.as_slice()) {
                        *o = v * inv;
                    }
                }
                accumulate(grads, *a, g);
            }
            Op::SumAll(a) => {
                let (rows, cols) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(rows, cols, gy.get(0, 0)));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = gy.get(0, 0) / labels.len() as f64;
                let mut g = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    let row = g.row_mut(r);
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(grads, *logits, g);
            }
        }
    }

    /// Parameter gradients gathered from a finished backward sweep.
    pub fn param_grads(&self, bp: &Backprop) -> Gradients {
        let mut out = Gradients::new(self.store.len());
        let mut entries: Vec<_> = self.param_vars.iter().collect();
        entries.sort_by_key(|(id, _)| **id);
        for (id, var) in entries {
            if let Some(g) = bp.grad(*var) {
                out.accumulate(*id, g);
            }
        }
        out
    }
}

pub struct Backprop {
    grads: Vec<Option<Matrix>>,
}

impl Backprop {
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, g: Matrix) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of one scalar-valued graph builder w.r.t. every
    /// entry of the first parameter.
    fn check(store: &ParamStore, build: impl Fn(&mut Graph) -> Var) {
        let g = {
            let mut graph = Graph::new(store);
            let out = build(&mut graph);
            let bp = graph.backward(&[(out, Matrix::scalar(1.0))]);
            graph.param_grads(&bp)
        };
        let h = 1e-5;
        for id in store.ids() {
            for k in 0..store.get(id).len() {
                let eval = |delta: f64| {
                    let mut s = store.clone();
                    s.get_mut(id).as_mut_slice()[k] += delta;
                    let mut graph = Graph::new(&s);
                    let out = build(&mut graph);
                    graph.value(out).get(0, 0)
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = g.get(id).map_or(0.0, |m| m.as_slice()[k]);
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(rel < 1e-6, "{} [{k}]: numeric {num} vs analytic {ana}", store.name(id));
            }
        }
    }

    fn store(shapes: &[(usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            s.insert(format!("p{i}"), Matrix::randn(r, c, 1.0, &mut rng));
        }
        s
    }

    #[test]
    fn matmul_softmax_layer_norm_chain() {
        let s = store(&[(3, 4), (4, 5), (1, 5), (1, 5)], 1);
        check(&s, |g| {
            let a = g.param(ParamId(0));
            let b = g.param(ParamId(1));
            let x = g.matmul(a, b);
            let x = g.layer_norm(x);
            let gamma = g.param(ParamId(2));
            let x = g.mul_row(x, gamma);
            let beta = g.param(ParamId(3));
            let x = g.add_row(x, beta);
            let x = g.gelu(x);
            let x = g.softmax(x);
            let w = g.constant(Matrix::from_vec(3, 5, (0..15).map(|i| i as f64 * 0.1).collect()).unwrap());
            let x = g.mul(x, w);
            g.sum_all(x)
        });
    }

    #[test]
    fn attention_pieces_and_structural_ops() {
        let s = store(&[(4, 6), (6, 6), (5, 6)], 2);
        check(&s, |g| {
            let x = g.param(ParamId(0));
            let w = g.param(ParamId(1));
            let q = g.matmul(x, w);
            let qa = g.slice_cols(q, 0, 3);
            let qb = g.slice_cols(q, 3, 3);
            let s1 = g.matmul_t(qa, qb);
            let s1 = g.scale(s1, 0.5);
            let p = g.softmax(s1);
            let o = g.matmul(p, qb);
            let o = g.concat_cols(&[o, qa]);
            let table = g.param(ParamId(2));
            let e = g.gather(table, &[1, 3, 1]);
            let x2 = g.slice_rows(x, 1, 3);
            let both = g.concat_rows(&[o, e]);
            let m = g.mean_rows(both);
            let n = g.normalize_rows(x2);
            let nm = g.mean_rows(n);
            let mm = g.mul(m, nm);
            let t = g.sum_all(mm);
            g.add_scalar(t, 3.0)
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        let s = store(&[(3, 4)], 3);
        check(&s, |g| {
            let l = g.param(ParamId(0));
            g.cross_entropy(l, &[0, 3, 2])
        });
    }

    #[test]
    fn masked_softmax_gives_zero_weight() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Matrix::from_rows(&[vec![1.0, f64::NEG_INFINITY], vec![0.0, 0.0]]).unwrap());
        let y = g.softmax(x);
        assert_eq!(g.value(y).row(0), &[1.0, 0.0]);
        let bp = g.backward(&[(y, Matrix::filled(2, 2, 1.0))]);
        assert!(bp.grad(x).unwrap().is_finite());
    }

    #[test]
    fn detach_blocks_gradient() {
        let s = store(&[(2, 2)], 4);
        let mut g = Graph::new(&s);
        let p = g.param(ParamId(0));
        let d = g.detach(p);
        let out = g.sum_all(d);
        let bp = g.backward(&[(out, Matrix::scalar(1.0))]);
        assert!(g.param_grads(&bp).get(ParamId(0)).is_none());
    }
}
