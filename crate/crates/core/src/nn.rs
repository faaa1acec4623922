//! Transformer building blocks on top of the autograd tape.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::linalg::Matrix;
use crate::rng::{normal, ChaCha8Rng};

const LN_EPS: f64 = 1e-5;

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal(rng) * std).collect())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights drawn from `N(0, 1/in_dim)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / libm::sqrt(in_dim.max(1) as f64);
        let w = gaussian(rng, in_dim, out_dim, std);
        Self::from_weight(store, name, w, bias)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::from_weight(store, name, Matrix::zeros(in_dim, out_dim), bias)
    }

    pub fn from_weight(store: &mut ParamStore, name: &str, w: Matrix, bias: bool) -> Self {
        let (in_dim, out_dim) = w.shape();
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim), true));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
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
        let mut v = alloc::vec![self.weight];
        v.extend(self.bias);
        v
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0), true),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, dim), true),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, true, rng),
        }
    }

    /// Same as [`Mlp::new`] but the output layer starts at zero.
    pub fn zero_output(store: &mut ParamStore, name: &str, dims: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, true, rng),
            fc2: Linear::zeros(store, &format!("{name}.fc2"), dims.1, dims.2, true),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Panics unless `heads` divides `dim`.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "heads must divide width");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
        }
    }

    /// Scaled dot-product attention of `query` rows over `memory` rows.
    /// `memory` must have at least one row.
    pub fn forward(&self, g: &mut Graph<'_>, query: Var, memory: Var, causal: bool) -> Var {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let dim = g.shape(q).1;
        let dh = dim / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, scale);
            let a = g.softmax(s, causal);
            outs.push(g.matmul(a, vh));
        }
        let o = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, o)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), (dim, dim * mlp_ratio, dim), rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, causal: bool) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, causal);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let m = self.mlp.forward(g, h);
        g.add(x, m)
    }
}
