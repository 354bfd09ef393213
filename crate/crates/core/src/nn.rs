//! Parameterised layers shared by the text and vision towers.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            Matrix::randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng),
        );
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Matrix::zeros(1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Matrix::filled(1, width, 1.0)),
            beta: store.insert(format!("{name}.beta"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let x = g.layer_norm(x);
        let gamma = g.param(self.gamma);
        let x = g.mul_row(x, gamma);
        let beta = g.param(self.beta);
        g.add_row(x, beta)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Multi-head scaled dot-product self-attention with output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads >= 1 && width % heads == 0, "width must split evenly across heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, true, rng),
            key: Linear::new(store, &format!("{name}.k"), width, width, true, rng),
            value: Linear::new(store, &format!("{name}.v"), width, width, true, rng),
            out: Linear::new(store, &format!("{name}.o"), width, width, true, rng),
            heads,
        }
    }

    /// `mask`, when given, is an additive `[L × L]` constant (0 or `-inf`).
    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<Var>) -> Var {
        let width = g.value(x).cols();
        let head_dim = width / self.heads;
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let scores = g.matmul_t(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let weights = g.softmax(scores);
            outputs.push(g.matmul(weights, vh));
        }
        let merged = if outputs.len() == 1 { outputs[0] } else { g.concat_cols(&outputs) };
        self.out.forward(g, merged)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.out].iter().flat_map(|l| l.params()).collect()
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub fc: Linear,
    pub proj: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        let hidden = 4 * width;
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), width),
            fc: Linear::new(store, &format!("{name}.mlp.fc"), width, hidden, true, rng),
            proj: Linear::new(store, &format!("{name}.mlp.proj"), hidden, width, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<Var>) -> Var {
        let h = self.ln_attn.forward(g, x);
        let h = self.attn.forward(g, h, mask);
        let x = g.add(x, h);
        let h = self.ln_mlp.forward(g, x);
        let h = self.fc.forward(g, h);
        let h = g.gelu(h);
        let h = self.proj.forward(g, h);
        g.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.ln_attn.params();
        p.extend(self.attn.params());
        p.extend(self.ln_mlp.params());
        p.extend(self.fc.params());
        p.extend(self.proj.params());
        p
    }
}

/// Additive lower-triangular mask: position `i` may attend to `j ≤ i`.
pub fn causal_mask(len: usize) -> Matrix {
    let mut m = Matrix::zeros(len, len);
    for i in 0..len {
        for j in i + 1..len {
            m.set(i, j, f64::NEG_INFINITY);
        }
    }
    m
}
