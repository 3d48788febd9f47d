//! Joint co-beam search per reading direction and cross-direction
//! re-decoding of the union of both N-best lists.

use std::cmp::Ordering;
use std::fmt::Write as _;

use vlamd_tensor::{no_grad, Tensor, LOG_EPS};

use crate::backbone::FeatureMap;
use crate::config::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::{Direction, Vlamd};
use crate::transd::{TransDCache, TransDMemory};
use crate::vlad::{VladMemory, VladState};
use crate::vocab::Vocab;

/// Log-probability as used by every scorer in this module.
pub fn log_prob(p: f64) -> f64 {
    p.max(LOG_EPS).ln()
}

/// `alpha * vlad + (1 - alpha) * transd`.
pub fn mix(alpha: f64, vlad: f64, transd: f64) -> f64 {
    alpha * vlad + (1.0 - alpha) * transd
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Generated ids, no BOS; ends in EOS once finished.
    pub tokens: Vec<usize>,
    pub logp_joint: f64,
    pub logp_vlad: f64,
    pub logp_transd: f64,
    pub vlad_state: VladState,
    pub transd_cache: TransDCache,
    pub finished: bool,
}

impl Hypothesis {
    /// Content ids without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&Vocab::EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Score descending, then token sequence ascending.
fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

#[derive(Debug, Clone)]
pub struct NBestList {
    pub direction: Direction,
    pub entries: Vec<Hypothesis>,
}

/// Per-image memories of all four heads.
#[derive(Debug, Clone)]
pub struct Prepared {
    vlad: [VladMemory; 2],
    transd: [TransDMemory; 2],
}

impl Prepared {
    pub fn new(model: &Vlamd, fmap: &FeatureMap) -> Result<Prepared> {
        if fmap.batch() != 1 {
            return Err(Error::Input(format!("decoding takes one image at a time, got {}", fmap.batch())));
        }
        if fmap.positions() == 0 {
            return Err(Error::Input("empty feature map".into()));
        }
        let s = &model.store;
        no_grad(|| {
            Ok(Prepared {
                vlad: [
                    model.vlad(Direction::L2R).prepare(s, fmap)?,
                    model.vlad(Direction::R2L).prepare(s, fmap)?,
                ],
                transd: [
                    model.transd(Direction::L2R).prepare(s, fmap)?,
                    model.transd(Direction::R2L).prepare(s, fmap)?,
                ],
            })
        })
    }
}

struct Candidate {
    score: f64,
    tokens: Vec<usize>,
    parent: usize,
    token: usize,
    lv: f64,
    lt: f64,
}

/// Beam search where every extension is scored by the log-linear mix of
/// both branches of `dir`, advancing them on the same prefix. Every returned
/// hypothesis ends in EOS within `max_len` tokens.
pub fn co_beam_search(model: &Vlamd, prep: &Prepared, cfg: &DecodeConfig, dir: Direction) -> Result<NBestList> {
    if cfg.beam_width == 0 || cfg.n_best == 0 {
        return Err(Error::config("decode.beam_width", "beam width and n_best must be positive"));
    }
    let store = &model.store;
    let vlad = model.vlad(dir);
    let transd = model.transd(dir);
    let vmem = &prep.vlad[dir.index()];
    let tmem = &prep.transd[dir.index()];
    let bos = model.vocab.bos();
    let max_len = cfg.max_len.min(vlad.dims().max_decode_len());

    no_grad(|| {
        let mut live = vec![Hypothesis {
            tokens: Vec::new(),
            logp_joint: 0.0,
            logp_vlad: 0.0,
            logp_transd: 0.0,
            vlad_state: vlad.initial_state(vmem, bos),
            transd_cache: TransDCache::new(),
            finished: false,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        let mut step = 0;
        while !live.is_empty() && step < max_len {
            step += 1;
            let mut next_states = Vec::with_capacity(live.len());
            let mut cands = Vec::new();
            for (pi, hyp) in live.iter().enumerate() {
                let prev = *hyp.tokens.last().unwrap_or(&bos);
                let vs = hyp.vlad_state.clone().with_prev(vec![prev]);
                let vout = vlad.decode_step(store, &vs, vmem)?;
                let (tdist, cache) = transd.incremental_step(store, &hyp.transd_cache, &[prev], tmem)?;
                let (pv, pt) = (vout.dist.data(), tdist.data());
                // the last admissible position only takes EOS
                let ks = if step == max_len { Vocab::EOS..Vocab::EOS + 1 } else { 0..pv.len() };
                for k in ks {
                    let lv = hyp.logp_vlad + log_prob(pv[k]);
                    let lt = hyp.logp_transd + log_prob(pt[k]);
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(k);
                    cands.push(Candidate {
                        score: mix(cfg.alpha, lv, lt),
                        tokens,
                        parent: pi,
                        token: k,
                        lv,
                        lt,
                    });
                }
                next_states.push((vout.state, cache));
            }
            cands.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
            cands.truncate(cfg.beam_width);
            let mut next_live = Vec::with_capacity(cands.len());
            for c in cands {
                let (vs, cache) = &next_states[c.parent];
                let hyp = Hypothesis {
                    tokens: c.tokens,
                    logp_joint: c.score,
                    logp_vlad: c.lv,
                    logp_transd: c.lt,
                    vlad_state: vs.clone(),
                    transd_cache: cache.clone(),
                    finished: c.token == Vocab::EOS,
                };
                if hyp.finished {
                    finished.push(hyp);
                } else {
                    next_live.push(hyp);
                }
            }
            live = next_live;
        }
        let mut entries = if finished.is_empty() { live } else { finished };
        entries.sort_by(|a, b| rank(a.logp_joint, &a.tokens, b.logp_joint, &b.tokens));
        entries.truncate(cfg.n_best);
        Ok(NBestList { direction: dir, entries })
    })
}

/// Per-branch and mixed teacher-forced log scores of one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceScore {
    pub vlad: f64,
    pub transd: f64,
    pub joint: f64,
}

/// Teacher-forces `tokens` (EOS-terminated, in `dir`'s reading order)
/// through both branches of `dir`.
pub fn force_score(model: &Vlamd, prep: &Prepared, tokens: &[usize], alpha: f64, dir: Direction) -> Result<ForceScore> {
    let store = &model.store;
    let bos = model.vocab.bos();
    no_grad(|| {
        let yv = model.vlad(dir).forced_decode(store, &prep.vlad[dir.index()], tokens, bos)?;
        let yt = model.transd(dir).forced_decode(store, &prep.transd[dir.index()], tokens, bos)?;
        let v = model.vocab.output_size();
        let sum = |y: &Tensor| -> f64 {
            tokens
                .iter()
                .enumerate()
                .map(|(t, &k)| log_prob(y.data()[t * v + k]))
                .sum()
        };
        let (sv, st) = (sum(&yv), sum(&yt));
        Ok(ForceScore {
            vlad: sv,
            transd: st,
            joint: mix(alpha, sv, st),
        })
    })
}

/// One scored candidate of re-decoding, in left-to-right orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub content: Vec<usize>,
    pub text: String,
    pub origin: Direction,
    pub generation_score: f64,
    pub logp_l2r: f64,
    pub logp_r2l_reversed: f64,
    pub combined: f64,
}

#[derive(Debug, Clone)]
pub struct RedecodeReport {
    pub nbest: [NBestList; 2],
    /// Sorted best first.
    pub candidates: Vec<ScoredCandidate>,
}

impl RedecodeReport {
    /// `rank, direction_of_origin, text, logp_l2r, logp_r2l_reversed, combined`.
    pub fn lines(&self) -> Vec<String> {
        self.candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                format!(
                    "{}\t{}\t{}\t{:.9}\t{:.9}\t{:.9}",
                    i + 1,
                    c.origin.name(),
                    c.text,
                    c.logp_l2r,
                    c.logp_r2l_reversed,
                    c.combined
                )
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in self.lines() {
            let _ = writeln!(s, "{l}");
        }
        s
    }
}

fn with_eos(content: &[usize]) -> Vec<usize> {
    let mut t = content.to_vec();
    t.push(Vocab::EOS);
    t
}

/// Scores a left-to-right content sequence under both directions and adds
/// the two sequence log-likelihoods.
pub fn combined_score(model: &Vlamd, prep: &Prepared, content: &[usize], cfg: &DecodeConfig) -> Result<(f64, f64, f64)> {
    let l2r = force_score(model, prep, &with_eos(content), cfg.alpha, Direction::L2R)?.joint;
    let r2l = force_score(model, prep, &with_eos(&Direction::R2L.orient(content)), cfg.alpha, Direction::R2L)?.joint;
    let mut combined = l2r + r2l;
    if cfg.length_norm {
        combined /= (content.len() + 1) as f64;
    }
    Ok((l2r, r2l, combined))
}

/// Runs co-beam search in both directions, merges the N-best lists in
/// left-to-right orientation and returns the candidate with the highest
/// combined cross-direction score.
pub fn mutual_redecode(model: &Vlamd, fmap: &FeatureMap, cfg: &DecodeConfig) -> Result<(Vec<usize>, RedecodeReport)> {
    let prep = Prepared::new(model, fmap)?;
    let nbest = [
        co_beam_search(model, &prep, cfg, Direction::L2R)?,
        co_beam_search(model, &prep, cfg, Direction::R2L)?,
    ];
    let mut merged: Vec<(Vec<usize>, Direction, f64)> = Vec::new();
    for list in &nbest {
        for h in &list.entries {
            let content = list.direction.orient(h.content());
            match merged.iter_mut().find(|(c, _, _)| *c == content) {
                Some(entry) => {
                    if h.logp_joint > entry.2 {
                        entry.1 = list.direction;
                        entry.2 = h.logp_joint;
                    }
                }
                None => merged.push((content, list.direction, h.logp_joint)),
            }
        }
    }
    let mut candidates = Vec::with_capacity(merged.len());
    for (content, origin, generation_score) in merged {
        let (logp_l2r, logp_r2l_reversed, combined) = combined_score(model, &prep, &content, cfg)?;
        candidates.push(ScoredCandidate {
            text: model.vocab.decode(&content),
            content,
            origin,
            generation_score,
            logp_l2r,
            logp_r2l_reversed,
            combined,
        });
    }
    candidates.sort_by(|a, b| rank(a.combined, &a.content, b.combined, &b.content));
    let best = candidates
        .first()
        .map(|c| c.content.clone())
        .ok_or_else(|| Error::Input("beam search produced no candidates".into()))?;
    Ok((best, RedecodeReport { nbest, candidates }))
}

/// Image `[3, H, W]` or `[1, 3, H, W]` to transcript.
pub fn recognize(model: &Vlamd, image: &Tensor, cfg: &DecodeConfig) -> Result<String> {
    Ok(recognize_with_report(model, image, cfg)?.0)
}

pub fn recognize_with_report(model: &Vlamd, image: &Tensor, cfg: &DecodeConfig) -> Result<(String, RedecodeReport)> {
    let image = if image.rank() == 3 {
        let s = image.shape();
        image.reshape(&[1, s[0], s[1], s[2]])?
    } else {
        image.clone()
    };
    let fmap = no_grad(|| model.encode(&image))?;
    let (best, report) = mutual_redecode(model, &fmap, cfg)?;
    Ok((model.vocab.decode(&best), report))
}
