//! Layers shared by the encoder and both decoders.

use vlamd_tensor::Tensor;

use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// Additive constant for masked attention scores; large enough that the
/// masked weights underflow to exactly zero.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Linear> {
        let mut s = init.scope(name);
        let w = s.xavier("weight", &[d_in, d_out], d_in, d_out)?;
        let b = if bias { Some(s.constant("bias", &[d_out], 0.0)?) } else { None };
        Ok(Linear { w, b })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(x.linear(store.get(self.w), self.b.map(|b| store.get(b)))?)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize) -> Result<LayerNorm> {
        let mut s = init.scope(name);
        Ok(LayerNorm {
            gamma: s.constant("gamma", &[d], 1.0)?,
            beta: s.constant("beta", &[d], 0.0)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(store.get(self.gamma), store.get(self.beta), LN_EPS)?)
    }
}

/// Output head: one linear layer, or linear-tanh-linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, d_in: usize, hidden: usize, d_out: usize, depth: usize) -> Result<Mlp> {
        let mut s = init.scope(name);
        let layers = if depth <= 1 {
            vec![Linear::new(&mut s, "fc1", d_in, d_out, true)?]
        } else {
            vec![
                Linear::new(&mut s, "fc1", d_in, hidden, true)?,
                Linear::new(&mut s, "fc2", hidden, d_out, true)?,
            ]
        };
        Ok(Mlp { layers })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.tanh();
            }
            h = l.forward(store, &h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, hidden: usize) -> Result<FeedForward> {
        let mut s = init.scope(name);
        Ok(FeedForward {
            fc1: Linear::new(&mut s, "fc1", d, hidden, true)?,
            fc2: Linear::new(&mut s, "fc2", hidden, d, true)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(store, &self.fc1.forward(store, x)?.relu())
    }
}

/// `[B, T, C] -> [B*heads, T, C/heads]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Ok(x.reshape(&[b, t, heads, c / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, t, c / heads])?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (bh, t, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let b = bh / heads;
    Ok(x.reshape(&[b, heads, t, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, t, heads * dh])?)
}

/// Scaled dot-product attention on split heads. `mask` is additive and
/// broadcast over the leading axis. Returns the mixed values and the weights.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let dh = q.shape()[2];
    let mut scores = q.bmm_nt(k)?.scale(1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    let w = scores.softmax(2)?;
    Ok((w.bmm(v)?, w))
}

/// `[t, t]` additive mask hiding future positions.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = MASK_NEG;
        }
    }
    Tensor::new(m, &[t, t]).expect("square mask")
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, d: usize, heads: usize) -> Result<MultiHeadAttention> {
        let mut s = init.scope(name);
        Ok(MultiHeadAttention {
            wq: Linear::new(&mut s, "w_q", d, d, true)?,
            wk: Linear::new(&mut s, "w_k", d, d, true)?,
            wv: Linear::new(&mut s, "w_v", d, d, true)?,
            wo: Linear::new(&mut s, "w_o", d, d, true)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn query(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        split_heads(&self.wq.forward(store, x)?, self.heads)
    }

    pub fn keys_values(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            split_heads(&self.wk.forward(store, x)?, self.heads)?,
            split_heads(&self.wv.forward(store, x)?, self.heads)?,
        ))
    }

    /// Merges heads and applies the output projection.
    pub fn output(&self, store: &ParamStore, mixed: &Tensor) -> Result<Tensor> {
        self.wo.forward(store, &merge_heads(mixed, self.heads)?)
    }

    /// Full attention of `x_q [B,Tq,C]` over `x_kv [B,Tk,C]`.
    pub fn forward(
        &self,
        store: &ParamStore,
        x_q: &Tensor,
        x_kv: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let q = self.query(store, x_q)?;
        let (k, v) = self.keys_values(store, x_kv)?;
        let (mixed, w) = attend(&q, &k, &v, mask)?;
        Ok((self.output(store, &mixed)?, w))
    }
}
