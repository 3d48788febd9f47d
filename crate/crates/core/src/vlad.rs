//! LSTM decoding branch with two visual-only context extractors and a
//! channel-wise gate that mixes them with the linguistic feature.
//!
//! One step at position `t` (1-based):
//!
//! * visual-aware attention: `a_t` from query `[emb(y_{t-1}); h_{t-1}]`,
//!   coverage-augmented additive energies over `F`;
//! * recurrence: `h_t = LSTM([emb(y_{t-1}); a_{t-1}], h_{t-1})` (the cached
//!   previous context feeds the cell), `r_t = [h_t; emb(y_{t-1})]`;
//! * position-aware attention: `q_t` from the learned position row `p_t`
//!   against keys `F'` and values `F`;
//! * gated fusion: `z = [r_t; a_t; q_t]`, `g_t = sigmoid(W_m z)`,
//!   `o_t = W_o (g_t * z)`;
//! * output: `softmax(MLP(o_t))`.

use vlamd_tensor::Tensor;

use crate::backbone::FeatureMap;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{Init, ParamId, ParamStore};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq)]
pub struct VladDims {
    pub c_model: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub fusion_dim: usize,
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
    pub in_vocab: usize,
    pub out_vocab: usize,
    /// Rows of the position table; one more than the longest decode.
    pub t_max: usize,
}

impl VladDims {
    pub fn from_config(cfg: &Config, vocab: &Vocab) -> VladDims {
        VladDims {
            c_model: cfg.model.c_model,
            hidden: cfg.vlad.hidden,
            attn_dim: cfg.vlad.attn_dim,
            fusion_dim: cfg.vlad.fusion_dim,
            mlp_layers: cfg.vlad.mlp_layers,
            mlp_hidden: cfg.vlad.mlp_hidden,
            in_vocab: vocab.input_size(),
            out_vocab: vocab.output_size(),
            t_max: cfg.model.max_len + 1,
        }
    }

    /// Width of the fused feature `[r_t; a_t; q_t]`.
    pub fn z_dim(&self) -> usize {
        self.hidden + 3 * self.c_model
    }

    pub fn max_decode_len(&self) -> usize {
        self.t_max - 1
    }
}

/// Recurrent state for a batch of sequences.
#[derive(Debug, Clone)]
pub struct VladState {
    pub h: Tensor,
    pub c_mem: Tensor,
    /// Context from the previous step; zero at `t = 1`.
    pub a_prev: Tensor,
    /// Sum of all past attention maps, `[B, N]`.
    pub coverage: Tensor,
    pub y_prev: Vec<usize>,
    /// 1-based index of the step this state will compute.
    pub t: usize,
}

impl VladState {
    pub fn with_prev(mut self, y_prev: Vec<usize>) -> VladState {
        self.y_prev = y_prev;
        self
    }
}

/// Per-image tensors that do not change across steps.
#[derive(Debug, Clone)]
pub struct VladMemory {
    f: Tensor,
    vaa_keys: Tensor,
    paa_keys: Tensor,
}

impl VladMemory {
    pub fn batch(&self) -> usize {
        self.f.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.f.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub dist: Tensor,
    pub state: VladState,
    pub gate: Tensor,
    pub alpha: Tensor,
    pub paa_alpha: Tensor,
}

#[derive(Debug, Clone)]
pub struct RecurrentOutput {
    pub h: Tensor,
    pub c_mem: Tensor,
    pub r: Tensor,
    pub a: Tensor,
    pub alpha: Tensor,
    pub coverage: Tensor,
}

#[derive(Debug, Clone)]
pub struct VladDecoder {
    dims: VladDims,
    embed: ParamId,
    vaa_q: Linear,
    vaa_k: Linear,
    vaa_cov: ParamId,
    vaa_v: ParamId,
    lstm_ih: Linear,
    lstm_hh: Linear,
    pos_table: ParamId,
    paa_q: Linear,
    paa_k: Linear,
    paa_v: ParamId,
    w_m: Linear,
    w_o: Linear,
    mlp: Mlp,
}

impl VladDecoder {
    pub fn new(init: &mut Init<'_>, dims: VladDims) -> Result<VladDecoder> {
        let (c, h, a, z) = (dims.c_model, dims.hidden, dims.attn_dim, dims.z_dim());
        let embed = init.uniform("embed", &[dims.in_vocab, c], 0.1)?;
        let (vaa_q, vaa_k, vaa_cov, vaa_v) = {
            let mut s = init.scope("vaa");
            (
                Linear::new(&mut s, "w_q", c + h, a, true)?,
                Linear::new(&mut s, "w_k", c, a, false)?,
                s.uniform("w_c", &[a], 0.1)?,
                s.xavier("v", &[a, 1], a, 1)?,
            )
        };
        let (lstm_ih, lstm_hh) = {
            let mut s = init.scope("lstm");
            (
                Linear::new(&mut s, "w_ih", 2 * c, 4 * h, true)?,
                Linear::new(&mut s, "w_hh", h, 4 * h, false)?,
            )
        };
        let (pos_table, paa_q, paa_k, paa_v) = {
            let mut s = init.scope("paa");
            (
                s.uniform("pos", &[dims.t_max, c], 0.5)?,
                Linear::new(&mut s, "w_q", c, a, true)?,
                Linear::new(&mut s, "w_k", c, a, false)?,
                s.xavier("v", &[a, 1], a, 1)?,
            )
        };
        let (w_m, w_o) = {
            let mut s = init.scope("agf");
            (
                Linear::new(&mut s, "w_m", z, z, true)?,
                Linear::new(&mut s, "w_o", z, dims.fusion_dim, true)?,
            )
        };
        let mlp = Mlp::new(init, "mlp", dims.fusion_dim, dims.mlp_hidden, dims.out_vocab, dims.mlp_layers)?;
        Ok(VladDecoder {
            dims,
            embed,
            vaa_q,
            vaa_k,
            vaa_cov,
            vaa_v,
            lstm_ih,
            lstm_hh,
            pos_table,
            paa_q,
            paa_k,
            paa_v,
            w_m,
            w_o,
            mlp,
        })
    }

    pub fn dims(&self) -> &VladDims {
        &self.dims
    }

    pub fn w_m(&self) -> &Linear {
        &self.w_m
    }

    pub fn pos_table(&self) -> ParamId {
        self.pos_table
    }

    pub fn prepare(&self, store: &ParamStore, fmap: &FeatureMap) -> Result<VladMemory> {
        if fmap.positions() == 0 {
            return Err(Error::Input("empty feature map".into()));
        }
        Ok(VladMemory {
            f: fmap.f.clone(),
            vaa_keys: self.vaa_k.forward(store, &fmap.f)?,
            paa_keys: self.paa_k.forward(store, &fmap.f_prime)?,
        })
    }

    pub fn initial_state(&self, mem: &VladMemory, bos: usize) -> VladState {
        let b = mem.batch();
        VladState {
            h: Tensor::zeros(&[b, self.dims.hidden]),
            c_mem: Tensor::zeros(&[b, self.dims.hidden]),
            a_prev: Tensor::zeros(&[b, self.dims.c_model]),
            coverage: Tensor::zeros(&[b, mem.positions()]),
            y_prev: vec![bos; b],
            t: 1,
        }
    }

    pub fn embed(&self, store: &ParamStore, ids: &[usize]) -> Result<Tensor> {
        Ok(store.get(self.embed).embedding(ids)?)
    }

    /// Additive attention: `softmax_i(v^T tanh(query + keys_i + extra_i))`,
    /// then the weighted sum of `F` rows. `query` is `[B|1, A]`.
    fn additive(store: &ParamStore, v: ParamId, query: &Tensor, keys: &Tensor, extra: Option<&Tensor>, f: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n) = (keys.shape()[0], keys.shape()[1]);
        let qb = query.shape()[0];
        let mut s = keys.add(&query.reshape(&[qb, 1, query.shape()[1]])?)?;
        if let Some(e) = extra {
            s = s.add(e)?;
        }
        let energies = s.tanh().linear(store.get(v), None)?.reshape(&[b, n])?;
        let alpha = energies.softmax(1)?;
        let ctx = alpha.reshape(&[b, 1, n])?.bmm(f)?.reshape(&[b, f.shape()[2]])?;
        Ok((ctx, alpha))
    }

    fn vaa_with_embedding(&self, store: &ParamStore, e_y: &Tensor, state: &VladState, mem: &VladMemory) -> Result<(Tensor, Tensor)> {
        let query = self.vaa_q.forward(store, &Tensor::concat(&[e_y.clone(), state.h.clone()], 1)?)?;
        let b = mem.batch();
        let cov = state
            .coverage
            .reshape(&[b, mem.positions(), 1])?
            .mul(store.get(self.vaa_cov))?;
        Self::additive(store, self.vaa_v, &query, &mem.vaa_keys, Some(&cov), &mem.f)
    }

    /// Visual-aware attention: returns `(a_t [B, C], alpha [B, N])`.
    pub fn vaa_attend(&self, store: &ParamStore, state: &VladState, mem: &VladMemory) -> Result<(Tensor, Tensor)> {
        let e_y = self.embed(store, &state.y_prev)?;
        self.vaa_with_embedding(store, &e_y, state, mem)
    }

    /// Position-aware attention for step `t`: `(q_t [B, C], alpha [B, N])`.
    pub fn paa_attend(&self, store: &ParamStore, t: usize, mem: &VladMemory) -> Result<(Tensor, Tensor)> {
        if t == 0 || t > self.dims.t_max {
            return Err(Error::Length { len: t, max: self.dims.t_max });
        }
        let p = store.get(self.pos_table).narrow(0, t - 1, 1)?;
        let query = self.paa_q.forward(store, &p)?;
        Self::additive(store, self.paa_v, &query, &mem.paa_keys, None, &mem.f)
    }

    /// Attention, LSTM update, and the linguistic feature for one step.
    pub fn recurrent_step(&self, store: &ParamStore, state: &VladState, mem: &VladMemory) -> Result<RecurrentOutput> {
        if state.t > self.dims.t_max {
            return Err(Error::Length {
                len: state.t,
                max: self.dims.t_max,
            });
        }
        let hd = self.dims.hidden;
        let e_y = self.embed(store, &state.y_prev)?;
        let (a, alpha) = self.vaa_with_embedding(store, &e_y, state, mem)?;

        let x = Tensor::concat(&[e_y.clone(), state.a_prev.clone()], 1)?;
        let gates = self.lstm_ih.forward(store, &x)?.add(&self.lstm_hh.forward(store, &state.h)?)?;
        let i = gates.narrow(1, 0, hd)?.sigmoid();
        let f = gates.narrow(1, hd, hd)?.sigmoid();
        let g = gates.narrow(1, 2 * hd, hd)?.tanh();
        let o = gates.narrow(1, 3 * hd, hd)?.sigmoid();
        let c_mem = f.mul(&state.c_mem)?.add(&i.mul(&g)?)?;
        let h = o.mul(&c_mem.tanh())?;

        let r = Tensor::concat(&[h.clone(), e_y], 1)?;
        let coverage = state.coverage.add(&alpha)?;
        Ok(RecurrentOutput {
            h,
            c_mem,
            r,
            a,
            alpha,
            coverage,
        })
    }

    /// Gated fusion: returns `(o_t, g_t)`.
    pub fn adaptive_gated_fusion(&self, store: &ParamStore, r: &Tensor, a: &Tensor, q: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = Tensor::concat(&[r.clone(), a.clone(), q.clone()], 1)?;
        let g = self.w_m.forward(store, &z)?.sigmoid();
        let o = self.w_o.forward(store, &g.mul(&z)?)?;
        Ok((o, g))
    }

    pub fn decode_step(&self, store: &ParamStore, state: &VladState, mem: &VladMemory) -> Result<StepOutput> {
        let rec = self.recurrent_step(store, state, mem)?;
        let (q, paa_alpha) = self.paa_attend(store, state.t, mem)?;
        let (o, gate) = self.adaptive_gated_fusion(store, &rec.r, &rec.a, &q)?;
        let dist = self.mlp.forward(store, &o)?.softmax(1)?;
        Ok(StepOutput {
            dist,
            state: VladState {
                h: rec.h,
                c_mem: rec.c_mem,
                a_prev: rec.a,
                coverage: rec.coverage,
                y_prev: state.y_prev.clone(),
                t: state.t + 1,
            },
            gate,
            alpha: rec.alpha,
            paa_alpha,
        })
    }

    /// Teacher-forced steps over per-sample input rows (`inputs[b][t]` is the
    /// token fed at step `t + 1`). Returns every step's output.
    pub fn forced_trace(&self, store: &ParamStore, mem: &VladMemory, inputs: &[Vec<usize>]) -> Result<Vec<StepOutput>> {
        let steps = inputs.first().map_or(0, Vec::len);
        if inputs.len() != mem.batch() || inputs.iter().any(|r| r.len() != steps) {
            return Err(Error::Alignment("input rows must match the batch and share one length".into()));
        }
        if steps > self.dims.max_decode_len() {
            return Err(Error::Length {
                len: steps,
                max: self.dims.max_decode_len(),
            });
        }
        let mut state = self.initial_state(mem, 0);
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            state = state.with_prev(inputs.iter().map(|r| r[t]).collect());
            let step = self.decode_step(store, &state, mem)?;
            state = step.state.clone();
            out.push(step);
        }
        Ok(out)
    }

    /// Teacher-forced distributions, `[B, T, V]`.
    pub fn forced_decode_batch(&self, store: &ParamStore, mem: &VladMemory, inputs: &[Vec<usize>]) -> Result<Tensor> {
        let trace = self.forced_trace(store, mem, inputs)?;
        let b = mem.batch();
        let v = self.dims.out_vocab;
        let parts = trace
            .iter()
            .map(|s| s.dist.reshape(&[b, 1, v]))
            .collect::<vlamd_tensor::Result<Vec<_>>>()?;
        Ok(Tensor::concat(&parts, 1)?)
    }

    /// Single sequence: `targets` is `[s_1 .. s_L, EOS]`; returns `[L+1, V]`.
    pub fn forced_decode(&self, store: &ParamStore, mem: &VladMemory, targets: &[usize], bos: usize) -> Result<Tensor> {
        let inputs = teacher_inputs(targets, bos, self.dims.max_decode_len())?;
        let y = self.forced_decode_batch(store, mem, &[inputs])?;
        Ok(y.reshape(&[targets.len(), self.dims.out_vocab])?)
    }
}

/// `[BOS, s_1 .. s_L]` for targets `[s_1 .. s_L, EOS]`.
pub fn teacher_inputs(targets: &[usize], bos: usize, max_len: usize) -> Result<Vec<usize>> {
    if targets.last() != Some(&Vocab::EOS) {
        return Err(Error::Input("target sequence must end with EOS".into()));
    }
    if targets.len() > max_len {
        return Err(Error::Length {
            len: targets.len(),
            max: max_len,
        });
    }
    let mut inputs = Vec::with_capacity(targets.len());
    inputs.push(bos);
    inputs.extend_from_slice(&targets[..targets.len() - 1]);
    Ok(inputs)
}
