//! Unified knowledge mining: fuse teacher anchors with the mapped student
//! feature and pull the fused feature toward every anchor.

use rand::Rng;

use crate::autograd::{softmax_rows, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{norm, Matrix};

/// Stacks the teacher groups of each class with that class's head output in
/// the last slot: `f_com[c]` is `[(G + 1) × d]`.
pub fn concat_complete(teacher: &[Matrix], head_out: &Matrix) -> Result<Vec<Matrix>> {
    check_complete_shapes(teacher.iter().map(Matrix::shape), head_out.shape())?;
    Ok(teacher
        .iter()
        .enumerate()
        .map(|(c, t)| Matrix::concat_rows(&[t, &head_out.slice_rows(c, 1)]))
        .collect())
}

pub fn concat_complete_graph(g: &mut Graph, teacher: &[Var], head_out: Var) -> Result<Vec<Var>> {
    let shapes: Vec<_> = teacher.iter().map(|&t| g.value(t).shape()).collect();
    check_complete_shapes(shapes.into_iter(), g.value(head_out).shape())?;
    Ok(teacher
        .iter()
        .enumerate()
        .map(|(c, &t)| {
            let s = g.slice_rows(head_out, c, 1);
            g.concat_rows(&[t, s])
        })
        .collect())
}

fn check_complete_shapes(
    teacher: impl ExactSizeIterator<Item = (usize, usize)>,
    head: (usize, usize),
) -> Result<()> {
    if teacher.len() != head.0 {
        return Err(Error::Contract(format!("{} teacher classes vs {} head rows", teacher.len(), head.0)));
    }
    let mut groups = None;
    for (g, d) in teacher {
        if d != head.1 || *groups.get_or_insert(g) != g {
            return Err(Error::Contract("teacher and head feature widths differ".into()));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, key_dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            query: store.insert(format!("{name}.w_q"), Matrix::randn(dim, key_dim, std, rng)),
            key: store.insert(format!("{name}.w_k"), Matrix::randn(dim, key_dim, std, rng)),
            value: store.insert(format!("{name}.w_v"), Matrix::randn(dim, key_dim, std, rng)),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.query, self.key, self.value]
    }

    /// `softmax(Q Kᵀ / √d_k) V` with `Q = X W_Q` etc. Returns output and weights.
    pub fn forward(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let wq = g.param(self.query);
        let wk = g.param(self.key);
        let wv = g.param(self.value);
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let key_dim = g.value(q).cols();
        let scores = g.matmul_t(q, k);
        let scores = g.scale(scores, 1.0 / (key_dim as f64).sqrt());
        let weights = g.softmax(scores);
        (g.matmul(weights, v), weights)
    }
}

/// Plain-value scaled dot-product self-attention over the rows of `x`.
pub fn self_attention(x: &Matrix, w_q: &Matrix, w_k: &Matrix, w_v: &Matrix) -> Result<Matrix> {
    attention_with_weights(x, w_q, w_k, w_v).map(|(out, _)| out)
}

pub fn attention_with_weights(x: &Matrix, w_q: &Matrix, w_k: &Matrix, w_v: &Matrix) -> Result<(Matrix, Matrix)> {
    if x.rows() == 0 {
        return Err(Error::Contract("attention over an empty sequence".into()));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite attention input".into()));
    }
    if w_q.rows() != x.cols() || w_k.shape() != w_q.shape() || w_v.rows() != x.cols() {
        return Err(Error::Contract("attention weight shapes".into()));
    }
    let q = x.matmul(w_q);
    let k = x.matmul(w_k);
    let v = x.matmul(w_v);
    let weights = softmax_rows(&q.matmul_t(&k).scaled(1.0 / (w_q.cols() as f64).sqrt()));
    Ok((weights.matmul(&v), weights))
}

/// Attention, mean pooling over the `(G + 1)` axis, then a residual MLP
/// `h + fc2(gelu(h))` with `h = fc1(pooled)`.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub attention: AttentionParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FusionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, key_dim: usize, rng: &mut R) -> Self {
        Self {
            attention: AttentionParams::new(store, "fusion.attn", dim, key_dim, rng),
            fc1: Linear::new(store, "fusion.mlp.fc1", key_dim, dim, true, rng),
            fc2: Linear::new(store, "fusion.mlp.fc2", dim, dim, true, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.attention.params();
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    /// `[c_u × d]` fused features, one row per unified class.
    pub fn forward(&self, g: &mut Graph, complete: &[Var]) -> Var {
        let rows: Vec<Var> = complete
            .iter()
            .map(|&x| {
                let (att, _) = self.attention.forward(g, x);
                let pooled = g.mean_rows(att);
                let h = self.fc1.forward(g, pooled);
                let m = g.gelu(h);
                let m = self.fc2.forward(g, m);
                g.add(h, m)
            })
            .collect();
        if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)
        }
    }
}

pub fn fuse(complete: &[Matrix], block: &FusionBlock, store: &ParamStore) -> Result<Matrix> {
    let width = store.get(block.attention.query).rows();
    if complete.iter().any(|m| m.cols() != width || m.rows() == 0) {
        return Err(Error::Contract("complete feature width does not match the fusion block".into()));
    }
    let mut g = Graph::new(store);
    let vars: Vec<Var> = complete.iter().map(|m| g.constant(m.clone())).collect();
    let out = block.forward(&mut g, &vars);
    Ok(g.value(out).clone())
}

/// Mean cosine distance between each class's fused row and each of its
/// teacher anchors: `1/(C·G) Σ_c Σ_g (1 − cos(fused[c], anchors[c][g]))`.
pub fn ufm_loss(fused: &Matrix, anchors: &[Matrix]) -> Result<f64> {
    check_ufm_inputs(fused, anchors)?;
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let f = g.constant(fused.clone());
    let a: Vec<Var> = anchors.iter().map(|m| g.constant(m.clone())).collect();
    let loss = ufm_loss_graph(&mut g, f, &a);
    Ok(g.value(loss).get(0, 0))
}

pub fn check_ufm_inputs(fused: &Matrix, anchors: &[Matrix]) -> Result<()> {
    if anchors.len() != fused.rows() {
        return Err(Error::Contract(format!("{} anchor classes vs {} fused rows", anchors.len(), fused.rows())));
    }
    for (c, a) in anchors.iter().enumerate() {
        if a.cols() != fused.cols() || a.rows() == 0 {
            return Err(Error::Contract("anchor shape".into()));
        }
        if norm(fused.row(c)) == 0.0 {
            return Err(Error::Numeric(format!("fused feature of class {c} has zero norm")));
        }
        for r in 0..a.rows() {
            if norm(a.row(r)) == 0.0 {
                return Err(Error::Numeric(format!("teacher anchor ({c}, {r}) has zero norm")));
            }
        }
    }
    Ok(())
}

pub fn ufm_loss_graph(g: &mut Graph, fused: Var, anchors: &[Var]) -> Var {
    let classes = anchors.len();
    let groups = g.value(anchors[0]).rows();
    let normed = g.normalize_rows(fused);
    let mut sims = Vec::with_capacity(classes);
    for (c, &a) in anchors.iter().enumerate() {
        let an = g.normalize_rows(a);
        let fc = g.slice_rows(normed, c, 1);
        let cos = g.matmul_t(an, fc);
        sims.push(g.sum_all(cos));
    }
    let total = if sims.len() == 1 { sims[0] } else { g.concat_rows(&sims) };
    let total = g.sum_all(total);
    let mean = g.scale(total, -1.0 / (classes * groups) as f64);
    g.add_scalar(mean, 1.0)
}
