//! Auxiliary transformer decoding head with learned positional queries.
//!
//! The input at position `t` is `q'_t + emb(y_{t-1})` (or `q'_t` alone when
//! the head is configured as queries-only). Layers are pre-norm
//! {causal self-attention, cross-attention into `F`, feed-forward}.

use vlamd_tensor::Tensor;

use crate::backbone::FeatureMap;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{attend, causal_mask, FeedForward, LayerNorm, Mlp, MultiHeadAttention};
use crate::params::{Init, ParamId, ParamStore};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq)]
pub struct TransDDims {
    pub c_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
    pub in_vocab: usize,
    pub out_vocab: usize,
    pub t_max: usize,
    pub autoregressive: bool,
}

impl TransDDims {
    pub fn from_config(cfg: &Config, vocab: &Vocab) -> TransDDims {
        TransDDims {
            c_model: cfg.model.c_model,
            layers: cfg.transd.layers,
            heads: cfg.transd.heads,
            ff_dim: cfg.transd.ff_dim,
            mlp_layers: cfg.transd.mlp_layers,
            mlp_hidden: cfg.transd.mlp_hidden,
            in_vocab: vocab.input_size(),
            out_vocab: vocab.output_size(),
            t_max: cfg.model.max_len + 1,
            autoregressive: cfg.transd.autoregressive,
        }
    }

    pub fn max_decode_len(&self) -> usize {
        self.t_max - 1
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Cross-attention keys and values of `F`, one pair per layer.
#[derive(Debug, Clone)]
pub struct TransDMemory {
    cross: Vec<(Tensor, Tensor)>,
    batch: usize,
}

/// Self-attention keys/values of the decoded prefix, one pair per layer.
#[derive(Debug, Clone, Default)]
pub struct TransDCache {
    layers: Vec<(Tensor, Tensor)>,
    len: usize,
}

impl TransDCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Output of a parallel pass: distributions plus per-layer cross-attention
/// weights `[B*heads, T, N]`.
#[derive(Debug, Clone)]
pub struct ParallelOutput {
    pub dists: Tensor,
    pub cross_weights: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TransDDecoder {
    dims: TransDDims,
    embed: ParamId,
    queries: ParamId,
    layers: Vec<DecoderLayer>,
    final_ln: LayerNorm,
    mlp: Mlp,
}

impl TransDDecoder {
    pub fn new(init: &mut Init<'_>, dims: TransDDims) -> Result<TransDDecoder> {
        let c = dims.c_model;
        if dims.heads == 0 || !c.is_multiple_of(dims.heads) {
            return Err(Error::config("transd.heads", "must divide model.c_model"));
        }
        let embed = init.uniform("embed", &[dims.in_vocab, c], 0.1)?;
        let queries = init.uniform("queries", &[dims.t_max, c], 0.5)?;
        let mut layers = Vec::with_capacity(dims.layers);
        for i in 0..dims.layers {
            let mut s = init.scope(&format!("dec{i}"));
            layers.push(DecoderLayer {
                ln1: LayerNorm::new(&mut s, "ln1", c)?,
                self_attn: MultiHeadAttention::new(&mut s, "self_attn", c, dims.heads)?,
                ln2: LayerNorm::new(&mut s, "ln2", c)?,
                cross_attn: MultiHeadAttention::new(&mut s, "cross_attn", c, dims.heads)?,
                ln3: LayerNorm::new(&mut s, "ln3", c)?,
                ff: FeedForward::new(&mut s, "ff", c, dims.ff_dim)?,
            });
        }
        let final_ln = LayerNorm::new(init, "final_ln", c)?;
        let mlp = Mlp::new(init, "mlp", c, dims.mlp_hidden, dims.out_vocab, dims.mlp_layers)?;
        Ok(TransDDecoder {
            dims,
            embed,
            queries,
            layers,
            final_ln,
            mlp,
        })
    }

    pub fn dims(&self) -> &TransDDims {
        &self.dims
    }

    pub fn prepare(&self, store: &ParamStore, fmap: &FeatureMap) -> Result<TransDMemory> {
        if fmap.positions() == 0 {
            return Err(Error::Input("empty feature map".into()));
        }
        let cross = self
            .layers
            .iter()
            .map(|l| l.cross_attn.keys_values(store, &fmap.f))
            .collect::<Result<Vec<_>>>()?;
        Ok(TransDMemory {
            cross,
            batch: fmap.batch(),
        })
    }

    /// Decoder inputs for positions `start+1 ..= start+T`, `[B, T, C]`.
    fn inputs(&self, store: &ParamStore, tokens: &[Vec<usize>], start: usize) -> Result<Tensor> {
        let b = tokens.len();
        let t = tokens.first().map_or(0, Vec::len);
        let c = self.dims.c_model;
        let q = store.get(self.queries).narrow(0, start, t)?;
        if !self.dims.autoregressive {
            return Ok(q.reshape(&[1, t, c])?.add(&Tensor::zeros(&[b, t, c]))?);
        }
        let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
        let e = store.get(self.embed).embedding(&flat)?.reshape(&[b, t, c])?;
        Ok(e.add(&q)?)
    }

    fn head(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        Ok(self.mlp.forward(store, &self.final_ln.forward(store, x)?)?.softmax(last)?)
    }

    /// Teacher-forced pass over all positions at once.
    pub fn forward_parallel(&self, store: &ParamStore, mem: &TransDMemory, inputs: &[Vec<usize>]) -> Result<ParallelOutput> {
        let t = inputs.first().map_or(0, Vec::len);
        if inputs.len() != mem.batch || inputs.iter().any(|r| r.len() != t) {
            return Err(Error::Alignment("input rows must match the batch and share one length".into()));
        }
        if t > self.dims.max_decode_len() {
            return Err(Error::Length {
                len: t,
                max: self.dims.max_decode_len(),
            });
        }
        let mask = causal_mask(t);
        let mut x = self.inputs(store, inputs, 0)?;
        let mut cross_weights = Vec::with_capacity(self.layers.len());
        for (layer, (ck, cv)) in self.layers.iter().zip(&mem.cross) {
            let h = layer.ln1.forward(store, &x)?;
            let (sa, _) = layer.self_attn.forward(store, &h, &h, Some(&mask))?;
            x = x.add(&sa)?;
            let h = layer.ln2.forward(store, &x)?;
            let q = layer.cross_attn.query(store, &h)?;
            let (mixed, w) = attend(&q, ck, cv, None)?;
            x = x.add(&layer.cross_attn.output(store, &mixed)?)?;
            x = x.add(&layer.ff.forward(store, &layer.ln3.forward(store, &x)?)?)?;
            cross_weights.push(w);
        }
        Ok(ParallelOutput {
            dists: self.head(store, &x)?,
            cross_weights,
        })
    }

    /// Teacher-forced distributions `[B, T, V]`.
    pub fn forced_decode_parallel(&self, store: &ParamStore, mem: &TransDMemory, inputs: &[Vec<usize>]) -> Result<Tensor> {
        Ok(self.forward_parallel(store, mem, inputs)?.dists)
    }

    /// Single sequence `[s_1 .. s_L, EOS]` -> `[L+1, V]`.
    pub fn forced_decode(&self, store: &ParamStore, mem: &TransDMemory, targets: &[usize], bos: usize) -> Result<Tensor> {
        let inputs = crate::vlad::teacher_inputs(targets, bos, self.dims.max_decode_len())?;
        let y = self.forced_decode_parallel(store, mem, &[inputs])?;
        Ok(y.reshape(&[targets.len(), self.dims.out_vocab])?)
    }

    /// Appends one position per sequence and returns its next-token
    /// distribution `[B, V]`.
    pub fn incremental_step(&self, store: &ParamStore, cache: &TransDCache, y_prev: &[usize], mem: &TransDMemory) -> Result<(Tensor, TransDCache)> {
        if cache.len >= self.dims.t_max {
            return Err(Error::Length {
                len: cache.len + 1,
                max: self.dims.t_max,
            });
        }
        if y_prev.len() != mem.batch {
            return Err(Error::Alignment("one previous token per sequence required".into()));
        }
        let rows: Vec<Vec<usize>> = y_prev.iter().map(|&y| vec![y]).collect();
        let mut x = self.inputs(store, &rows, cache.len)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, (layer, (ck, cv))) in self.layers.iter().zip(&mem.cross).enumerate() {
            let h = layer.ln1.forward(store, &x)?;
            let q = layer.self_attn.query(store, &h)?;
            let (k, v) = layer.self_attn.keys_values(store, &h)?;
            let (k, v) = match cache.layers.get(i) {
                Some((pk, pv)) => (Tensor::concat(&[pk.clone(), k], 1)?, Tensor::concat(&[pv.clone(), v], 1)?),
                None => (k, v),
            };
            let (mixed, _) = attend(&q, &k, &v, None)?;
            x = x.add(&layer.self_attn.output(store, &mixed)?)?;
            layers.push((k, v));
            let h = layer.ln2.forward(store, &x)?;
            let q = layer.cross_attn.query(store, &h)?;
            let (mixed, _) = attend(&q, ck, cv, None)?;
            x = x.add(&layer.cross_attn.output(store, &mixed)?)?;
            x = x.add(&layer.ff.forward(store, &layer.ln3.forward(store, &x)?)?)?;
        }
        let b = mem.batch;
        let dist = self.head(store, &x)?.reshape(&[b, self.dims.out_vocab])?;
        Ok((dist, TransDCache { layers, len: cache.len + 1 }))
    }
}
