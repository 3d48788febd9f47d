//! Four-head training objective and the AdamW loop.
//!
//! Every batch is teacher-forced through VLAD and TransD in both reading
//! directions. The objective is the sum of the four cross-entropies plus
//! `lambda` times the mutual KL of each branch, where each direction is
//! pulled towards a reversed, gradient-stopped copy of the other.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlamd_tensor::{no_grad, Tensor};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Direction, Vlamd};
use crate::params::ParamStore;
use crate::vocab::Vocab;

/// Targets of one word in both reading directions, EOS-terminated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetPair {
    pub s_l2r: Vec<usize>,
    pub s_r2l: Vec<usize>,
}

impl TargetPair {
    pub fn new(content: &[usize]) -> TargetPair {
        let mut s_l2r = content.to_vec();
        s_l2r.push(Vocab::EOS);
        let mut s_r2l: Vec<usize> = content.iter().rev().copied().collect();
        s_r2l.push(Vocab::EOS);
        TargetPair { s_l2r, s_r2l }
    }

    pub fn get(&self, dir: Direction) -> &[usize] {
        match dir {
            Direction::L2R => &self.s_l2r,
            Direction::R2L => &self.s_r2l,
        }
    }

    /// `L + 1`: content plus EOS.
    pub fn len(&self) -> usize {
        self.s_l2r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_l2r.is_empty()
    }
}

/// Padded layout of a batch of sequences with lengths `L_b + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    lengths: Vec<usize>,
    steps: usize,
}

impl Alignment {
    pub fn new(lengths: Vec<usize>) -> Result<Alignment> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(Error::Alignment("every sequence needs at least the EOS position".into()));
        }
        let steps = *lengths.iter().max().expect("nonempty");
        Ok(Alignment { lengths, steps })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Row weights for `[B*T]` rows: mean over a sequence's own positions,
    /// then mean over the batch. Padding rows get zero.
    pub fn weights(&self) -> Vec<f64> {
        let b = self.batch() as f64;
        let mut w = vec![0.0; self.batch() * self.steps];
        for (i, &n) in self.lengths.iter().enumerate() {
            for t in 0..n {
                w[i * self.steps + t] = 1.0 / (b * n as f64);
            }
        }
        w
    }

    /// Row map for the sequence-reverse of the other direction: content
    /// position `i` pairs with content position `L-1-i`, EOS with EOS, and
    /// padding with itself.
    pub fn reverse_index(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.batch() * self.steps);
        for (b, &n) in self.lengths.iter().enumerate() {
            let content = n - 1;
            for t in 0..self.steps {
                let src = if t < content { content - 1 - t } else { t };
                idx.push(b * self.steps + src);
            }
        }
        idx
    }

    fn check(&self, y: &Tensor) -> Result<usize> {
        let s = y.shape();
        if s.len() != 3 || s[0] != self.batch() || s[1] != self.steps {
            return Err(Error::Alignment(format!(
                "distribution shape {:?} does not match batch {} x steps {}",
                s,
                self.batch(),
                self.steps
            )));
        }
        Ok(s[2])
    }
}

/// Teacher-forcing inputs and flat targets for a batch of words.
#[derive(Debug, Clone)]
pub struct BatchTargets {
    pub pairs: Vec<TargetPair>,
    pub align: Alignment,
    inputs: [Vec<Vec<usize>>; 2],
    targets: [Vec<usize>; 2],
}

impl BatchTargets {
    pub fn new(contents: &[Vec<usize>], vocab: &Vocab) -> Result<BatchTargets> {
        let pairs: Vec<TargetPair> = contents.iter().map(|c| TargetPair::new(c)).collect();
        let align = Alignment::new(pairs.iter().map(TargetPair::len).collect())?;
        let t = align.steps();
        let build = |dir: Direction| {
            let mut inputs = Vec::with_capacity(pairs.len());
            let mut targets = Vec::with_capacity(pairs.len() * t);
            for p in &pairs {
                let s = p.get(dir);
                let mut row = Vec::with_capacity(t);
                row.push(vocab.bos());
                row.extend_from_slice(&s[..s.len() - 1]);
                row.resize(t, vocab.pad());
                inputs.push(row);
                targets.extend_from_slice(s);
                targets.resize(targets.len() + t - s.len(), Vocab::EOS);
            }
            (inputs, targets)
        };
        let (il, tl) = build(Direction::L2R);
        let (ir, tr) = build(Direction::R2L);
        Ok(BatchTargets {
            pairs,
            align,
            inputs: [il, ir],
            targets: [tl, tr],
        })
    }

    pub fn inputs(&self, dir: Direction) -> &[Vec<usize>] {
        &self.inputs[dir.index()]
    }

    pub fn targets(&self, dir: Direction) -> &[usize] {
        &self.targets[dir.index()]
    }
}

/// Teacher-forced distributions `[B, T, V]` of the four heads.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub vlad: [Tensor; 2],
    pub transd: [Tensor; 2],
}

pub fn forward_heads(model: &Vlamd, images: &Tensor, bt: &BatchTargets) -> Result<HeadOutputs> {
    let fmap = model.encode(images)?;
    let store = &model.store;
    let run_vlad = |dir: Direction| -> Result<Tensor> {
        let v = model.vlad(dir);
        let mem = v.prepare(store, &fmap)?;
        v.forced_decode_batch(store, &mem, bt.inputs(dir))
    };
    let run_transd = |dir: Direction| -> Result<Tensor> {
        let t = model.transd(dir);
        let mem = t.prepare(store, &fmap)?;
        t.forced_decode_parallel(store, &mem, bt.inputs(dir))
    };
    Ok(HeadOutputs {
        vlad: [run_vlad(Direction::L2R)?, run_vlad(Direction::R2L)?],
        transd: [run_transd(Direction::L2R)?, run_transd(Direction::R2L)?],
    })
}

/// Padding-masked sequence cross-entropy of one head.
pub fn sequence_ce(y: &Tensor, targets: &[usize], align: &Alignment) -> Result<Tensor> {
    align.check(y)?;
    Ok(y.weighted_nll(targets, &align.weights())?)
}

/// Sum of the four cross-entropy terms; also returns each term.
pub fn main_loss(heads: &HeadOutputs, bt: &BatchTargets) -> Result<(Tensor, [f64; 4])> {
    let terms = [
        sequence_ce(&heads.vlad[0], bt.targets(Direction::L2R), &bt.align)?,
        sequence_ce(&heads.vlad[1], bt.targets(Direction::R2L), &bt.align)?,
        sequence_ce(&heads.transd[0], bt.targets(Direction::L2R), &bt.align)?,
        sequence_ce(&heads.transd[1], bt.targets(Direction::R2L), &bt.align)?,
    ];
    let values = [terms[0].item(), terms[1].item(), terms[2].item(), terms[3].item()];
    let total = terms[0].add(&terms[1])?.add(&terms[2])?.add(&terms[3])?;
    Ok((total, values))
}

/// Sequence-reverse followed by stop-gradient.
pub fn reverse_stop(y: &Tensor, align: &Alignment) -> Result<Tensor> {
    let v = align.check(y)?;
    let rows = align.batch() * align.steps();
    Ok(y.reshape(&[rows, v])?
        .index_select(0, &align.reverse_index())?
        .reshape(y.shape())?
        .stop_gradient())
}

/// `KL(p || RS(q))`; no gradient reaches `q`.
pub fn kl_to_reversed(p: &Tensor, q: &Tensor, align: &Alignment) -> Result<Tensor> {
    let v = align.check(p)?;
    if align.check(q)? != v {
        return Err(Error::Alignment("vocabulary sizes differ".into()));
    }
    Ok(p.weighted_kl_div(&reverse_stop(q, align)?, &align.weights())?)
}

/// `KL(Y_l2r || RS(Y_r2l)) + KL(Y_r2l || RS(Y_l2r))`.
pub fn mutual_loss(y_l2r: &Tensor, y_r2l: &Tensor, align: &Alignment) -> Result<Tensor> {
    if y_l2r.shape() != y_r2l.shape() {
        return Err(Error::Alignment(format!(
            "direction shapes differ: {:?} vs {:?}",
            y_l2r.shape(),
            y_r2l.shape()
        )));
    }
    Ok(kl_to_reversed(y_l2r, y_r2l, align)?.add(&kl_to_reversed(y_r2l, y_l2r, align)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub ce_vlad_l2r: f64,
    pub ce_vlad_r2l: f64,
    pub ce_transd_l2r: f64,
    pub ce_transd_r2l: f64,
    pub kl_vlad: f64,
    pub kl_transd: f64,
    pub total: f64,
}

impl LossReport {
    pub fn main(&self) -> f64 {
        self.ce_vlad_l2r + self.ce_vlad_r2l + self.ce_transd_l2r + self.ce_transd_r2l
    }

    pub fn recombine(&self, lambda: f64) -> f64 {
        self.main() + lambda * self.kl_vlad + lambda * self.kl_transd
    }

    fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("ce_vlad_l2r", self.ce_vlad_l2r),
            ("ce_vlad_r2l", self.ce_vlad_r2l),
            ("ce_transd_l2r", self.ce_transd_l2r),
            ("ce_transd_r2l", self.ce_transd_r2l),
            ("kl_vlad", self.kl_vlad),
            ("kl_transd", self.kl_transd),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite component.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.named().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    /// `step, lr, ce x4, kl x2, total`, tab-separated.
    pub fn log_line(&self, step: usize, lr: f64) -> String {
        let mut s = format!("{step}\t{lr:.3e}");
        for (_, v) in self.named() {
            let _ = write!(s, "\t{v:.6}");
        }
        s
    }
}

/// `L_main + lambda * L_mut(VLAD) + lambda * L_mut(TransD)`.
///
/// With `lambda == 0` the KL terms are evaluated for the report only and
/// stay out of the graph, so gradients equal those of the main loss exactly.
pub fn total_loss(heads: &HeadOutputs, bt: &BatchTargets, lambda: f64) -> Result<(Tensor, LossReport)> {
    total_loss_against(heads, heads, bt, lambda)
}

/// [`total_loss`] with the reversed KL targets taken from `frozen` instead
/// of `heads`. With `frozen` fixed this is an ordinary differentiable
/// function whose gradient at `frozen == heads` is the training gradient.
pub fn total_loss_against(heads: &HeadOutputs, frozen: &HeadOutputs, bt: &BatchTargets, lambda: f64) -> Result<(Tensor, LossReport)> {
    let (main, ce) = main_loss(heads, bt)?;
    let mutual = |live: &[Tensor; 2], fixed: &[Tensor; 2]| -> Result<Tensor> {
        Ok(kl_to_reversed(&live[0], &fixed[1], &bt.align)?.add(&kl_to_reversed(&live[1], &fixed[0], &bt.align)?)?)
    };
    let (total, kl_vlad, kl_transd) = if lambda == 0.0 {
        let (kv, kt) = no_grad(|| -> Result<(f64, f64)> {
            Ok((mutual(&heads.vlad, &frozen.vlad)?.item(), mutual(&heads.transd, &frozen.transd)?.item()))
        })?;
        (main, kv, kt)
    } else {
        let kv = mutual(&heads.vlad, &frozen.vlad)?;
        let kt = mutual(&heads.transd, &frozen.transd)?;
        let (kvv, ktv) = (kv.item(), kt.item());
        let total = main.add(&kv.scale(lambda))?.add(&kt.scale(lambda))?;
        (total, kvv, ktv)
    };
    let report = LossReport {
        ce_vlad_l2r: ce[0],
        ce_vlad_r2l: ce[1],
        ce_transd_l2r: ce[2],
        ce_transd_r2l: ce[3],
        kl_vlad,
        kl_transd,
        total: total.item(),
    };
    Ok((total, report))
}

/// Learning rate after `step` optimizer steps: `lr * decay^k` where `k` is
/// the number of milestones already passed.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let passed = cfg
        .milestones
        .iter()
        .filter(|&&m| step >= (m * cfg.max_steps as f64).round() as usize)
        .count();
    cfg.lr * cfg.decay.powi(passed as i32)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> AdamW {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get(id);
            let Some(g) = p.grad() else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
            store.set(id, data)?;
        }
        Ok(())
    }
}

/// Images and content-token targets held in memory.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub images: Vec<Vec<f64>>,
    pub targets: Vec<Vec<usize>>,
    pub image_shape: [usize; 3],
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let [c, h, w] = self.image_shape;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
        }
        let images = Tensor::new(data, &[indices.len(), c, h, w])?;
        let targets = indices.iter().map(|&i| self.targets[i].clone()).collect();
        Ok((images, targets))
    }
}

/// Seeded epoch-by-epoch shuffled batches.
#[derive(Debug, Clone)]
pub struct BatchOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl BatchOrder {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> BatchOrder {
        BatchOrder {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0bad_cafe),
            perm: (0..n).collect(),
            pos: n,
            batch_size: batch_size.min(n).max(1),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.perm.len() {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.perm[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        b
    }
}

pub struct Trainer {
    pub model: Vlamd,
    pub optim: AdamW,
    pub cfg: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Vlamd) -> Trainer {
        let cfg = model.config.train.clone();
        let optim = AdamW::new(&model.store, cfg.weight_decay);
        Trainer {
            model,
            optim,
            cfg,
            step: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        lr_at(&self.cfg, self.step)
    }

    /// One forward over all four heads, one backward, one AdamW update.
    pub fn train_step(&mut self, images: &Tensor, contents: &[Vec<usize>]) -> Result<LossReport> {
        let bt = BatchTargets::new(contents, &self.model.vocab)?;
        self.model.store.zero_grad();
        let heads = forward_heads(&self.model, images, &bt)?;
        let (loss, report) = total_loss(&heads, &bt, self.cfg.lambda)?;
        if let Some(name) = report.first_non_finite() {
            return Err(Error::NonFinite(name.into()));
        }
        loss.backward()?;
        for (name, p) in self.model.store.iter() {
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
            }
        }
        let lr = self.lr();
        self.optim.step(&mut self.model.store, lr)?;
        self.step += 1;
        Ok(report)
    }

    /// Trains until `cfg.max_steps`, calling `hook` after every step.
    pub fn fit(
        &mut self,
        data: &TrainSet,
        mut hook: impl FnMut(&Trainer, &LossReport, f64) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let mut order = BatchOrder::new(data.len(), self.cfg.batch_size, self.cfg.seed);
        // replay the batch order on resume
        for _ in 0..self.step {
            order.next_batch();
        }
        while self.step < self.cfg.max_steps {
            let idx = order.next_batch();
            let (images, targets) = data.batch(&idx)?;
            let lr = self.lr();
            let report = self.train_step(&images, &targets)?;
            hook(self, &report, lr)?;
        }
        Ok(())
    }
}
