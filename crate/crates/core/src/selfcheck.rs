//! Finite-difference gradient suite and beam enumeration oracle at tiny
//! dimensions, shared by the `selfcheck` command and the test suites.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlamd_tensor::gradcheck::{check, check_steps};
use vlamd_tensor::{Result as TResult, Tensor};

use crate::config::Config;
use crate::decode::{co_beam_search, combined_score, force_score, mix, mutual_redecode, Prepared};
use crate::error::Result;
use crate::model::{Direction, Vlamd};
use crate::trainer::{forward_heads, main_loss, total_loss, total_loss_against, BatchTargets, HeadOutputs};
use crate::vocab::Vocab;

pub const FD_STEP: f64 = 1e-5;
/// Step ladder for the whole-model check, where some ReLU pre-activation
/// in the stem or a feed-forward block can sit within `FD_STEP` of its kink.
pub const MODEL_FD_STEPS: [f64; 4] = [1e-5, 1e-6, 1e-7, 1e-8];
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Vocab of 8 (7 characters + EOS), `16 x 32` images, `C = 16`.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    for (k, v) in [
        ("data.charset", "abcdefg"),
        ("data.height", "16"),
        ("data.width", "32"),
        ("data.min_word_len", "1"),
        ("data.max_word_len", "3"),
        ("model.c_model", "16"),
        ("model.enc_layers", "1"),
        ("model.heads", "2"),
        ("model.ff_dim", "32"),
        ("model.max_len", "4"),
        ("vlad.hidden", "16"),
        ("vlad.attn_dim", "16"),
        ("vlad.fusion_dim", "16"),
        ("vlad.mlp_hidden", "16"),
        ("transd.layers", "1"),
        ("transd.heads", "2"),
        ("transd.ff_dim", "32"),
        ("transd.mlp_hidden", "16"),
        ("decode.beam_width", "4"),
        ("decode.n_best", "2"),
        ("decode.max_len", "4"),
    ] {
        c.set(k, v).expect("valid tiny setting");
    }
    c.validate().expect("valid tiny config");
    c
}

/// `V = 5` (4 characters + EOS), sequences of at most 3 tokens including
/// EOS, beam and N-best wide enough to hold every terminated sequence.
pub fn enumeration_config() -> Config {
    let mut c = tiny_config();
    for (k, v) in [
        ("data.charset", "abcd"),
        ("data.height", "16"),
        ("data.width", "16"),
        ("data.max_word_len", "2"),
        ("model.max_len", "3"),
        ("decode.max_len", "3"),
        ("decode.beam_width", "125"),
        ("decode.n_best", "21"),
    ] {
        c.set(k, v).expect("valid enumeration setting");
    }
    c.validate().expect("valid enumeration config");
    c
}

pub fn random_images(seed: u64, batch: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * 3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(data, &[batch, 3, h, w]).expect("consistent shape")
}

/// Every content sequence over `n_chars` characters with at most
/// `max_content` tokens, in length-then-lexicographic order.
pub fn all_contents(n_chars: usize, max_content: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_content {
        let mut next = Vec::new();
        for p in &frontier {
            for c in 1..=n_chars {
                let mut s: Vec<usize> = p.clone();
                s.push(c);
                next.push(s);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).expect("consistent shape")
}

fn rand_dist(rng: &mut ChaCha8Rng, rows: usize, v: usize) -> Tensor {
    rand_tensor(rng, &[rows, v]).scale(2.0).softmax(1).expect("rank 2").stop_gradient()
}

fn probe(y: &Tensor, seed: u64) -> TResult<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, y.shape());
    Ok(y.mul(&w)?.sum_all())
}

type OpCase = (&'static str, Box<dyn Fn(&[Tensor]) -> TResult<Tensor>>, Vec<Tensor>);

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    let a = rand_tensor(r, &[3, 4]);
    let b = rand_tensor(r, &[4, 5]);
    let row = rand_tensor(r, &[4]);
    let x3 = rand_tensor(r, &[2, 3, 4]);
    let y3 = rand_tensor(r, &[2, 4, 3]);
    let z3 = rand_tensor(r, &[2, 5, 4]);
    let pos = Tensor::new((0..12).map(|i| 0.2 + 0.1 * i as f64).collect(), &[3, 4]).expect("shape");
    let gamma = rand_tensor(r, &[4]);
    let beta = rand_tensor(r, &[4]);
    let w = rand_tensor(r, &[4, 6]);
    let bias = rand_tensor(r, &[6]);
    let table = rand_tensor(r, &[5, 3]);
    let img = rand_tensor(r, &[2, 2, 5, 6]);
    let kern = rand_tensor(r, &[3, 2, 3, 3]);
    let kb = rand_tensor(r, &[3]);
    let p = rand_dist(r, 4, 5);
    let q = rand_dist(r, 4, 5);
    let logits = rand_tensor(r, &[4, 5]);
    let weights = vec![0.5, 0.0, 0.25, 0.25];
    let w2 = weights.clone();

    vec![
        ("add", Box::new(|x: &[Tensor]| probe(&x[0].add(&x[1])?, 1)), vec![a.clone(), row.clone()]),
        ("sub", Box::new(|x: &[Tensor]| probe(&x[0].sub(&x[1])?, 2)), vec![a.clone(), row.clone()]),
        ("mul", Box::new(|x: &[Tensor]| probe(&x[0].mul(&x[1])?, 3)), vec![a.clone(), row.clone()]),
        ("scale", Box::new(|x: &[Tensor]| probe(&x[0].scale(-1.7), 4)), vec![a.clone()]),
        ("neg", Box::new(|x: &[Tensor]| probe(&x[0].neg(), 4)), vec![a.clone()]),
        ("add_scalar", Box::new(|x: &[Tensor]| probe(&x[0].add_scalar(0.3), 4)), vec![a.clone()]),
        ("sigmoid", Box::new(|x: &[Tensor]| probe(&x[0].sigmoid(), 5)), vec![a.clone()]),
        ("tanh", Box::new(|x: &[Tensor]| probe(&x[0].tanh(), 5)), vec![a.clone()]),
        ("relu", Box::new(|x: &[Tensor]| probe(&x[0].relu(), 5)), vec![a.clone()]),
        ("exp", Box::new(|x: &[Tensor]| probe(&x[0].exp(), 5)), vec![a.clone()]),
        ("ln_clamped", Box::new(|x: &[Tensor]| probe(&x[0].ln_clamped(1e-12), 5)), vec![pos]),
        ("square", Box::new(|x: &[Tensor]| probe(&x[0].square(), 5)), vec![a.clone()]),
        ("matmul", Box::new(|x: &[Tensor]| probe(&x[0].matmul(&x[1])?, 6)), vec![a.clone(), b]),
        ("bmm", Box::new(|x: &[Tensor]| probe(&x[0].bmm(&x[1])?, 6)), vec![x3.clone(), y3]),
        ("bmm_nt", Box::new(|x: &[Tensor]| probe(&x[0].bmm_nt(&x[1])?, 6)), vec![x3.clone(), z3]),
        (
            "linear",
            Box::new(|x: &[Tensor]| probe(&x[0].linear(&x[1], Some(&x[2]))?, 7)),
            vec![x3.clone(), w, bias],
        ),
        ("reshape", Box::new(|x: &[Tensor]| probe(&x[0].reshape(&[6, 4])?, 8)), vec![x3.clone()]),
        ("permute", Box::new(|x: &[Tensor]| probe(&x[0].permute(&[2, 0, 1])?, 8)), vec![x3.clone()]),
        ("transpose", Box::new(|x: &[Tensor]| probe(&x[0].transpose()?, 8)), vec![x3.clone()]),
        ("narrow", Box::new(|x: &[Tensor]| probe(&x[0].narrow(1, 1, 2)?, 8)), vec![x3.clone()]),
        (
            "index_select",
            Box::new(|x: &[Tensor]| probe(&x[0].index_select(1, &[2, 0, 2, 1])?, 8)),
            vec![x3.clone()],
        ),
        ("embedding", Box::new(|x: &[Tensor]| probe(&x[0].embedding(&[4, 1, 4])?, 8)), vec![table]),
        (
            "concat",
            Box::new(|x: &[Tensor]| probe(&Tensor::concat(&[x[0].clone(), x[1].clone()], 0)?, 8)),
            vec![x3.clone(), x3.clone()],
        ),
        ("sum_all", Box::new(|x: &[Tensor]| Ok(x[0].square().sum_all())), vec![a.clone()]),
        ("mean_all", Box::new(|x: &[Tensor]| Ok(x[0].square().mean_all())), vec![a.clone()]),
        ("softmax", Box::new(|x: &[Tensor]| probe(&x[0].softmax(1)?, 9)), vec![x3.clone()]),
        (
            "layer_norm",
            Box::new(|x: &[Tensor]| probe(&x[0].layer_norm(&x[1], &x[2], 1e-5)?, 10)),
            vec![x3, gamma, beta],
        ),
        (
            "conv2d",
            Box::new(|x: &[Tensor]| probe(&x[0].conv2d(&x[1], &x[2], 1, 1)?, 11)),
            vec![img.clone(), kern.clone(), kb.clone()],
        ),
        (
            "conv2d_stride2",
            Box::new(|x: &[Tensor]| probe(&x[0].conv2d_stride2(&x[1], &x[2])?, 11)),
            vec![img, kern, kb],
        ),
        ("cross_entropy", Box::new(|x: &[Tensor]| x[0].cross_entropy(&[0, 4, 2, 2])), vec![p.clone()]),
        (
            "weighted_nll",
            Box::new(move |x: &[Tensor]| x[0].weighted_nll(&[1, 3, 0, 2], &weights)),
            vec![p.clone()],
        ),
        ("kl_div", Box::new(|x: &[Tensor]| x[0].kl_div(&x[1])), vec![p.clone(), q.clone()]),
        (
            "weighted_kl_div",
            Box::new(move |x: &[Tensor]| x[0].weighted_kl_div(&x[1], &w2)),
            vec![p, q],
        ),
        (
            "softmax_cross_entropy",
            Box::new(|x: &[Tensor]| x[0].softmax(1)?.cross_entropy(&[1, 2, 3, 4])),
            vec![logits],
        ),
    ]
}

/// Central differences against backward for every tensor operation.
pub fn gradient_check_ops() -> CheckResult {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for (name, f, inputs) in op_cases() {
        match check(f, &inputs, FD_STEP, None) {
            Ok(r) => {
                if r.worst() > worst.0 {
                    worst = (r.worst(), name);
                }
                if r.worst() >= GRAD_TOL {
                    failures.push(format!("{name} ({:.2e})", r.worst()));
                }
            }
            Err(e) => failures.push(format!("{name} ({e})")),
        }
    }
    CheckResult {
        name: "gradients/ops".into(),
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!(
                "worst rel err {:.2e} ({}) in {:.1}s",
                worst.0,
                worst.1,
                start.elapsed().as_secs_f64()
            )
        } else {
            format!("failed: {}", failures.join(", "))
        },
    }
}

/// Batch used by the end-to-end checks: words of length 3 and 2 so that
/// padding is exercised.
pub fn tiny_batch(model: &Vlamd, seed: u64) -> Result<(Tensor, BatchTargets)> {
    let (h, w) = (model.config.data.height, model.config.data.width);
    let words = [model.vocab.encode("cab")?, model.vocab.encode("gd")?];
    let bt = BatchTargets::new(&words, &model.vocab)?;
    Ok((random_images(seed, words.len(), h, w), bt))
}

/// Total loss of `model` with its parameters replaced by `params`. The
/// reversed KL targets come from `frozen` when given.
pub fn loss_with_params(
    model: &Vlamd,
    params: &[Tensor],
    images: &Tensor,
    bt: &BatchTargets,
    lambda: f64,
    frozen: Option<&HeadOutputs>,
) -> Result<Tensor> {
    let mut m = model.clone();
    let ids: Vec<_> = m.store.ids().collect();
    for (id, t) in ids.into_iter().zip(params) {
        m.store.replace(id, t.clone())?;
    }
    let heads = forward_heads(&m, images, bt)?;
    Ok(total_loss_against(&heads, frozen.unwrap_or(&heads), bt, lambda)?.0)
}

/// End-to-end check of the total loss against every parameter tensor,
/// probing up to `per_tensor` entries of each (all entries when `None`).
pub fn gradient_check_model(per_tensor: Option<usize>) -> Result<CheckResult> {
    let start = Instant::now();
    let cfg = tiny_config();
    let model = Vlamd::new(&cfg, 5)?;
    let (images, bt) = tiny_batch(&model, 6)?;
    let params: Vec<Tensor> = model.store.iter().map(|(_, t)| t.stop_gradient()).collect();
    let lambda = cfg.train.lambda;
    // the gradient-stopped targets are constants of the loss, so the
    // finite-difference reference keeps them at their base-point values
    let frozen = vlamd_tensor::no_grad(|| forward_heads(&model, &images, &bt))?;
    let f = |ps: &[Tensor]| -> TResult<Tensor> {
        loss_with_params(&model, ps, &images, &bt, lambda, Some(&frozen)).map_err(|e| vlamd_tensor::TensorError::Invalid(e.to_string()))
    };
    let pick = move |i: usize, n: usize| -> Vec<usize> {
        match per_tensor {
            Some(k) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
                let mut idx = sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        }
    };
    let r = check_steps(f, &params, &MODEL_FD_STEPS, GRAD_TOL / 10.0, Some(&pick))?;
    let (k, worst) = r
        .max_rel_err
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |acc, (i, &e)| if e > acc.1 { (i, e) } else { acc });
    let worst_name = model.store.iter().nth(k).map_or("", |(n, _)| n).to_string();
    Ok(CheckResult {
        name: "gradients/model".into(),
        passed: worst < GRAD_TOL,
        detail: format!(
            "{} entries over {} tensors, worst rel err {worst:.2e} ({worst_name}) in {:.1}s",
            r.entries_checked,
            params.len(),
            start.elapsed().as_secs_f64()
        ),
    })
}

fn argmax_by<T: Clone>(items: impl IntoIterator<Item = (T, f64)>) -> Option<(T, f64)> {
    // strict comparison keeps the first of equal scores
    items.into_iter().fold(None, |best, (x, s)| match best {
        Some((_, bs)) if bs >= s => best,
        _ => Some((x, s)),
    })
}

/// Outcome of one enumeration run against a random model.
#[derive(Debug, Clone)]
pub struct EnumerationOutcome {
    pub seed: u64,
    /// `(beam top-1, brute-force argmax)` per direction, EOS-terminated.
    pub beam: [(Vec<usize>, Vec<usize>); 2],
    /// `(mutual_redecode winner, brute-force argmax)`, content only.
    pub redecode: (Vec<usize>, Vec<usize>),
}

impl EnumerationOutcome {
    pub fn passed(&self) -> bool {
        self.beam.iter().all(|(a, b)| a == b) && self.redecode.0 == self.redecode.1
    }
}

pub fn enumeration_run(seed: u64) -> Result<EnumerationOutcome> {
    let cfg = enumeration_config();
    let model = Vlamd::new(&cfg, seed)?;
    let (h, w) = (cfg.data.height, cfg.data.width);
    let image = random_images(seed ^ 0xabc, 1, h, w);
    let fmap = vlamd_tensor::no_grad(|| model.encode(&image))?;
    let prep = Prepared::new(&model, &fmap)?;
    let contents = all_contents(model.vocab.chars().len(), cfg.decode.max_len - 1);
    let with_eos = |c: &[usize]| {
        let mut t = c.to_vec();
        t.push(Vocab::EOS);
        t
    };
    let mut beam = Vec::with_capacity(2);
    for dir in Direction::BOTH {
        let scored = contents
            .iter()
            .map(|c| {
                let t = with_eos(c);
                force_score(&model, &prep, &t, cfg.decode.alpha, dir).map(|s| (t, s.joint))
            })
            .collect::<Result<Vec<_>>>()?;
        let (brute, _) = argmax_by(scored).expect("nonempty space");
        let list = co_beam_search(&model, &prep, &cfg.decode, dir)?;
        let top = list.entries.first().map(|h| h.tokens.clone()).unwrap_or_default();
        beam.push((top, brute));
    }
    let scored = contents
        .iter()
        .map(|c| combined_score(&model, &prep, c, &cfg.decode).map(|s| (c.clone(), s.2)))
        .collect::<Result<Vec<_>>>()?;
    let (brute, _) = argmax_by(scored).expect("nonempty space");
    let (winner, _) = mutual_redecode(&model, &fmap, &cfg.decode)?;
    let [l2r, r2l]: [(Vec<usize>, Vec<usize>); 2] = beam.try_into().expect("two directions");
    Ok(EnumerationOutcome {
        seed,
        beam: [l2r, r2l],
        redecode: (winner, brute),
    })
}

/// Exhaustive beam search and re-decoding against brute force on
/// `n_models` random models.
pub fn beam_enumeration(n_models: usize) -> Result<CheckResult> {
    let start = Instant::now();
    let mut failed = Vec::new();
    for seed in 0..n_models as u64 {
        let o = enumeration_run(seed)?;
        if !o.passed() {
            failed.push(format!("seed {seed}: {:?}", o));
        }
    }
    Ok(CheckResult {
        name: "beam/enumeration".into(),
        passed: failed.is_empty(),
        detail: if failed.is_empty() {
            format!(
                "{n_models} models, both directions and re-decoding in {:.1}s",
                start.elapsed().as_secs_f64()
            )
        } else {
            failed.join("; ")
        },
    })
}

/// Gradient of the mutual term with respect to its reversed operand.
pub fn stop_gradient_check() -> Result<CheckResult> {
    let cfg = tiny_config();
    let model = Vlamd::new(&cfg, 9)?;
    let (images, bt) = tiny_batch(&model, 10)?;
    let heads = vlamd_tensor::no_grad(|| forward_heads(&model, &images, &bt))?;
    let p = heads.vlad[0].to_param();
    let q = heads.vlad[1].to_param();
    crate::trainer::kl_to_reversed(&p, &q, &bt.align)?.backward()?;
    let q_grad = q.grad_or_zeros();
    let p_grad = p.grad_or_zeros();
    let exact = q_grad.iter().all(|&g| g == 0.0);
    let live = p_grad.iter().any(|&g| g != 0.0);
    Ok(CheckResult {
        name: "gradients/stop-gradient".into(),
        passed: exact && live,
        detail: format!(
            "max |grad| on reversed operand {:.2e}, on live operand {:.2e}",
            q_grad.iter().fold(0.0f64, |a, g| a.max(g.abs())),
            p_grad.iter().fold(0.0f64, |a, g| a.max(g.abs()))
        ),
    })
}

/// Total-loss gradients at `lambda = 0` against main-loss gradients, bit
/// for bit.
pub fn lambda_zero_check() -> Result<CheckResult> {
    let cfg = tiny_config();
    let model = Vlamd::new(&cfg, 12)?;
    let (images, bt) = tiny_batch(&model, 13)?;
    let grads = |use_total: bool| -> Result<Vec<Vec<f64>>> {
        model.store.zero_grad();
        let heads = forward_heads(&model, &images, &bt)?;
        let loss = if use_total {
            total_loss(&heads, &bt, 0.0)?.0
        } else {
            main_loss(&heads, &bt)?.0
        };
        loss.backward()?;
        Ok(model.store.iter().map(|(_, t)| t.grad_or_zeros()).collect())
    };
    let total = grads(true)?;
    let main = grads(false)?;
    model.store.zero_grad();
    let differing = total
        .iter()
        .zip(&main)
        .filter(|(a, b)| a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()))
        .count();
    let scalars: usize = total.iter().map(Vec::len).sum();
    Ok(CheckResult {
        name: "gradients/lambda-zero".into(),
        passed: differing == 0,
        detail: format!("{differing} of {} tensors differ ({scalars} scalars compared)", total.len()),
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Beam hypotheses against independent teacher forcing, and incremental
/// TransD steps against the parallel pass.
pub fn score_consistency(n_models: usize) -> Result<CheckResult> {
    let start = Instant::now();
    let mut cfg = tiny_config();
    cfg.set("decode.beam_width", "6")?;
    cfg.set("decode.n_best", "6")?;
    let (h, w) = (cfg.data.height, cfg.data.width);
    let mut worst_force = 0.0f64;
    let mut worst_mix = 0.0f64;
    let mut worst_inc = 0.0f64;
    let mut hyps = 0;
    for seed in 0..n_models as u64 {
        let model = Vlamd::new(&cfg, 100 + seed)?;
        let image = random_images(200 + seed, 1, h, w);
        let fmap = vlamd_tensor::no_grad(|| model.encode(&image))?;
        let prep = Prepared::new(&model, &fmap)?;
        for dir in Direction::BOTH {
            let list = co_beam_search(&model, &prep, &cfg.decode, dir)?;
            for hyp in &list.entries {
                worst_mix = worst_mix.max((hyp.logp_joint - mix(cfg.decode.alpha, hyp.logp_vlad, hyp.logp_transd)).abs());
                if hyp.finished {
                    let f = force_score(&model, &prep, &hyp.tokens, cfg.decode.alpha, dir)?;
                    worst_force = worst_force
                        .max((hyp.logp_joint - f.joint).abs())
                        .max((hyp.logp_vlad - f.vlad).abs())
                        .max((hyp.logp_transd - f.transd).abs());
                    hyps += 1;
                }
            }
        }
        worst_inc = worst_inc.max(incremental_gap(&model, &fmap, seed)?);
    }
    Ok(CheckResult {
        name: "decode/score-consistency".into(),
        passed: hyps > 0 && worst_force <= 1e-6 && worst_mix <= 1e-9 && worst_inc <= 1e-6,
        detail: format!(
            "{hyps} finished hypotheses, max |beam - forced| {worst_force:.2e}, max mix gap {worst_mix:.2e}, \
             max |incremental - parallel| {worst_inc:.2e} in {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    })
}

/// Largest gap between incremental and parallel TransD distributions over
/// random input rows, at every position of both directions.
pub fn incremental_gap(model: &Vlamd, fmap: &crate::backbone::FeatureMap, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let store = &model.store;
    let steps = model.config.model.max_len;
    let v = model.vocab.output_size();
    let mut worst = 0.0f64;
    vlamd_tensor::no_grad(|| -> Result<()> {
        for dir in Direction::BOTH {
            let td = model.transd(dir);
            let mem = td.prepare(store, fmap)?;
            let mut row = vec![model.vocab.bos()];
            row.extend((1..steps).map(|_| rng.gen_range(0..v)));
            let par = td.forced_decode_parallel(store, &mem, &[row.clone()])?;
            let mut cache = crate::transd::TransDCache::new();
            for (t, &y) in row.iter().enumerate() {
                let (dist, next) = td.incremental_step(store, &cache, &[y], &mem)?;
                cache = next;
                worst = worst.max(max_abs_diff(dist.data(), &par.data()[t * v..(t + 1) * v]));
            }
        }
        Ok(())
    })?;
    Ok(worst)
}

#[derive(Debug, Clone, Copy, Default)]
struct NormStats {
    attention: f64,
    coverage: f64,
    dists: f64,
    gate_min: f64,
    gate_max: f64,
    count: usize,
}

impl NormStats {
    fn rows(&mut self, t: &Tensor, width: usize, target: f64) -> f64 {
        let mut worst = 0.0f64;
        for r in t.data().chunks(width) {
            worst = worst.max((r.iter().sum::<f64>() - target).abs());
            self.count += 1;
        }
        worst
    }

    fn attention(&mut self, t: &Tensor) {
        let n = *t.shape().last().expect("nonempty shape");
        let w = self.rows(t, n, 1.0);
        self.attention = self.attention.max(w);
    }

    fn dist(&mut self, t: &Tensor) {
        let n = *t.shape().last().expect("nonempty shape");
        let w = self.rows(t, n, 1.0);
        self.dists = self.dists.max(w);
    }
}

/// Attention maps, coverage, output distributions and fusion gates over a
/// teacher-forced batch and a beam search.
pub fn normalization_check() -> Result<CheckResult> {
    let cfg = tiny_config();
    let model = Vlamd::new(&cfg, 21)?;
    let (images, bt) = tiny_batch(&model, 22)?;
    let store = &model.store;
    let mut st = NormStats {
        gate_min: 1.0,
        ..NormStats::default()
    };
    vlamd_tensor::no_grad(|| -> Result<()> {
        let fmap = model.encode(&images)?;
        let mut x = model.backbone.stem(store, &images)?;
        for layer in model.backbone.layers() {
            let (next, w) = layer.forward_with_weights(store, &x)?;
            st.attention(&w);
            x = next;
        }
        for dir in Direction::BOTH {
            let v = model.vlad(dir);
            let mem = v.prepare(store, &fmap)?;
            let n = mem.positions();
            let mut state = v.initial_state(&mem, model.vocab.bos());
            let inputs = bt.inputs(dir);
            for t in 0..inputs[0].len() {
                state = state.with_prev(inputs.iter().map(|r| r[t]).collect());
                let expected = state.t as f64 - 1.0;
                let w = st.rows(&state.coverage, n, expected);
                st.coverage = st.coverage.max(w);
                let step = v.decode_step(store, &state, &mem)?;
                st.attention(&step.alpha);
                st.attention(&step.paa_alpha);
                st.dist(&step.dist);
                for &g in step.gate.data() {
                    st.gate_min = st.gate_min.min(g);
                    st.gate_max = st.gate_max.max(g);
                }
                state = step.state;
            }
            let td = model.transd(dir);
            let tmem = td.prepare(store, &fmap)?;
            let out = td.forward_parallel(store, &tmem, inputs)?;
            st.dist(&out.dists);
            for w in &out.cross_weights {
                st.attention(w);
            }
        }
        for b in 0..images.shape()[0] {
            let prep = Prepared::new(&model, &fmap.select(b)?)?;
            for dir in Direction::BOTH {
                for h in co_beam_search(&model, &prep, &cfg.decode, dir)?.entries {
                    let n = h.vlad_state.coverage.shape()[1];
                    let w = st.rows(&h.vlad_state.coverage, n, h.vlad_state.t as f64 - 1.0);
                    st.coverage = st.coverage.max(w);
                }
            }
        }
        Ok(())
    })?;
    let passed = st.attention <= 1e-6 && st.coverage <= 1e-5 && st.dists <= 1e-6 && st.gate_min > 0.0 && st.gate_max < 1.0;
    Ok(CheckResult {
        name: "normalization".into(),
        passed,
        detail: format!(
            "{} rows; max attention gap {:.2e}, coverage gap {:.2e}, distribution gap {:.2e}, gates in [{:.4}, {:.4}]",
            st.count, st.attention, st.coverage, st.dists, st.gate_min, st.gate_max
        ),
    })
}

/// The full self-check at the sizes used by the command-line tool.
pub fn run_all() -> Vec<CheckResult> {
    let fail = |name: &str, e: crate::Error| CheckResult {
        name: name.into(),
        passed: false,
        detail: e.to_string(),
    };
    vec![
        gradient_check_ops(),
        gradient_check_model(Some(4)).unwrap_or_else(|e| fail("gradients/model", e)),
        stop_gradient_check().unwrap_or_else(|e| fail("gradients/stop-gradient", e)),
        lambda_zero_check().unwrap_or_else(|e| fail("gradients/lambda-zero", e)),
        score_consistency(3).unwrap_or_else(|e| fail("decode/score-consistency", e)),
        normalization_check().unwrap_or_else(|e| fail("normalization", e)),
        beam_enumeration(5).unwrap_or_else(|e| fail("beam/enumeration", e)),
    ]
}
