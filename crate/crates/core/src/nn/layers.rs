//! Parameterised building blocks composed from graph primitives.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Affine map `x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_xavier(format!("{name}.weight"), fan_in, fan_out, rng)?,
            bias: store.add_zeros(format!("{name}.bias"), &[fan_out])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_full(format!("{name}.gain"), &[dim], 1.0)?,
            bias: store.add_zeros(format!("{name}.bias"), &[dim])?,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q_proj: Linear::new(store, &format!("{name}.wq"), dim, dim, rng)?,
            k_proj: Linear::new(store, &format!("{name}.wk"), dim, dim, rng)?,
            v_proj: Linear::new(store, &format!("{name}.wv"), dim, dim, rng)?,
            out_proj: Linear::new(store, &format!("{name}.wo"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// Attends `[nq, dim]` queries over `[nk, dim]` keys/values. `mask`, when
    /// given, is an additive `[nq, nk]` bias (use a large negative value to
    /// block a key). Returns the output and one `[nq, nk]` weight node per head.
    pub fn forward(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Tensor>,
    ) -> Result<(Var, Vec<Var>)> {
        let (nq, nk) = (g.shape(q)[0], g.shape(k)[0]);
        if g.shape(k) != g.shape(v) || g.shape(q)[1] != self.dim || g.shape(k)[1] != self.dim {
            return Err(Error::shape("multi_head_attention", g.shape(q), g.shape(k)));
        }
        let mask = match mask {
            Some(m) if m.shape() != [nq, nk] => {
                return Err(Error::shape("attention mask", m.shape(), &[nq, nk]));
            }
            Some(m) => Some(g.constant(m.clone())?),
            None => None,
        };
        let qp = self.q_proj.forward(g, q)?;
        let kp = self.k_proj.forward(g, k)?;
        let vp = self.v_proj.forward(g, v)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_last(qp, h * dh, dh)?;
            let kh = g.slice_last(kp, h * dh, dh)?;
            let vh = g.slice_last(vp, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let w = g.softmax(scores, 1)?;
            outs.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_last(&outs)? };
        Ok((self.out_proj.forward(g, cat)?, weights))
    }
}

/// Two-layer position-wise MLP with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, dropout: f64) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h)?;
        let h = g.dropout(h, dropout)?;
        self.fc2.forward(g, h)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.layer{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }
}
