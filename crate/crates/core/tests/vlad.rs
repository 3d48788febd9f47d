use vlamd_core::selfcheck::{random_images, tiny_config};
use vlamd_core::vlad::{teacher_inputs, VladState};
use vlamd_core::{Direction, Vlamd};
use vlamd_tensor::{no_grad, Tensor};

fn setup(seed: u64) -> (Vlamd, vlamd_core::backbone::FeatureMap) {
    let cfg = tiny_config();
    let model = Vlamd::new(&cfg, seed).unwrap();
    let image = random_images(seed + 1, 1, cfg.data.height, cfg.data.width);
    let fmap = no_grad(|| model.encode(&image)).unwrap();
    (model, fmap)
}

fn param<'a>(model: &'a Vlamd, name: &str) -> &'a [f64] {
    let id = model.store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    model.store.get(id).data()
}

/// `x @ W (+ b)` with `W` stored `[d_in, d_out]`.
fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let d_out = w.len() / x.len();
    (0..d_out)
        .map(|j| {
            let s: f64 = x.iter().enumerate().map(|(i, xi)| xi * w[i * d_out + j]).sum();
            s + b.map_or(0.0, |b| b[j])
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// State after one real step so that `h`, `a_prev` and coverage are all
/// nonzero.
fn second_state(model: &Vlamd, fmap: &vlamd_core::backbone::FeatureMap) -> VladState {
    let v = model.vlad(Direction::L2R);
    let mem = v.prepare(&model.store, fmap).unwrap();
    let s0 = v.initial_state(&mem, model.vocab.bos());
    v.decode_step(&model.store, &s0, &mem).unwrap().state.with_prev(vec![3])
}

#[test]
fn lstm_matches_scalar_cell() {
    let (model, fmap) = setup(1);
    no_grad(|| {
        let v = model.vlad(Direction::L2R);
        let mem = v.prepare(&model.store, &fmap).unwrap();
        let state = second_state(&model, &fmap);
        let out = v.recurrent_step(&model.store, &state, &mem).unwrap();

        let hd = state.h.shape()[1];
        let e = &param(&model, "vlad.l2r.embed")[3 * 16..4 * 16];
        let mut x = e.to_vec();
        x.extend_from_slice(state.a_prev.data());
        let ih = affine(&x, param(&model, "vlad.l2r.lstm.w_ih.weight"), Some(param(&model, "vlad.l2r.lstm.w_ih.bias")));
        let hh = affine(state.h.data(), param(&model, "vlad.l2r.lstm.w_hh.weight"), None);
        for k in 0..hd {
            let gate = |blk: usize| ih[blk * hd + k] + hh[blk * hd + k];
            let (i, f, g, o) = (sigmoid(gate(0)), sigmoid(gate(1)), gate(2).tanh(), sigmoid(gate(3)));
            let c = f * state.c_mem.data()[k] + i * g;
            let h = o * c.tanh();
            assert!((out.c_mem.data()[k] - c).abs() < 1e-12, "c[{k}]");
            assert!((out.h.data()[k] - h).abs() < 1e-12, "h[{k}]");
        }
        // r_t = [h_t; emb(y_{t-1})]
        assert_eq!(&out.r.data()[..hd], out.h.data());
        assert_eq!(&out.r.data()[hd..], e);
    });
}

#[test]
fn vaa_matches_scalar_loop() {
    let (model, fmap) = setup(2);
    no_grad(|| {
        let v = model.vlad(Direction::L2R);
        let mem = v.prepare(&model.store, &fmap).unwrap();
        let state = second_state(&model, &fmap);
        let (ctx, alpha) = v.vaa_attend(&model.store, &state, &mem).unwrap();

        let (n, c) = (fmap.positions(), fmap.channels());
        let f = fmap.f.data();
        let e = &param(&model, "vlad.l2r.embed")[3 * c..4 * c];
        let mut qin = e.to_vec();
        qin.extend_from_slice(state.h.data());
        let q = affine(&qin, param(&model, "vlad.l2r.vaa.w_q.weight"), Some(param(&model, "vlad.l2r.vaa.w_q.bias")));
        let wc = param(&model, "vlad.l2r.vaa.w_c");
        let vv = param(&model, "vlad.l2r.vaa.v");
        let energies: Vec<f64> = (0..n)
            .map(|i| {
                let k = affine(&f[i * c..(i + 1) * c], param(&model, "vlad.l2r.vaa.w_k.weight"), None);
                (0..q.len())
                    .map(|a| vv[a] * (q[a] + k[a] + state.coverage.data()[i] * wc[a]).tanh())
                    .sum()
            })
            .collect();
        let m = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = energies.iter().map(|x| (x - m).exp()).sum();
        for i in 0..n {
            let a = (energies[i] - m).exp() / z;
            assert!((alpha.data()[i] - a).abs() < 1e-12);
        }
        for ch in 0..c {
            let want: f64 = (0..n).map(|i| alpha.data()[i] * f[i * c + ch]).sum();
            assert!((ctx.data()[ch] - want).abs() < 1e-12);
        }
    });
}

#[test]
fn coverage_accumulates_past_attention() {
    let (model, fmap) = setup(3);
    no_grad(|| {
        let v = model.vlad(Direction::R2L);
        let mem = v.prepare(&model.store, &fmap).unwrap();
        let mut state = v.initial_state(&mem, model.vocab.bos());
        let mut running = vec![0.0; fmap.positions()];
        for t in 1..=4 {
            let sum: f64 = state.coverage.data().iter().sum();
            assert!((sum - (t - 1) as f64).abs() < 1e-12, "step {t}: {sum}");
            for (r, c) in running.iter().zip(state.coverage.data()) {
                assert!((r - c).abs() < 1e-12);
            }
            let step = v.decode_step(&model.store, &state.clone().with_prev(vec![t]), &mem).unwrap();
            for (r, a) in running.iter_mut().zip(step.alpha.data()) {
                *r += a;
            }
            state = step.state;
        }
    });
}

#[test]
fn paa_ignores_the_decoded_prefix() {
    let (model, fmap) = setup(4);
    no_grad(|| {
        let v = model.vlad(Direction::L2R);
        let mem = v.prepare(&model.store, &fmap).unwrap();
        let s0 = v.initial_state(&mem, model.vocab.bos());
        let a = v.decode_step(&model.store, &s0.clone().with_prev(vec![1]), &mem).unwrap();
        let b = v.decode_step(&model.store, &s0.with_prev(vec![5]), &mem).unwrap();
        assert_eq!(a.paa_alpha.data(), b.paa_alpha.data());
        assert_ne!(a.alpha.data(), b.alpha.data());
        let (_, p2) = v.paa_attend(&model.store, 2, &mem).unwrap();
        assert_ne!(p2.data(), a.paa_alpha.data());
        assert!(v.paa_attend(&model.store, 0, &mem).is_err());
    });
}

#[test]
fn zero_gate_weights_give_half_gates() {
    let (mut model, fmap) = setup(5);
    let w_m = model.vlad(Direction::L2R).w_m().clone();
    let wid = w_m.weight();
    let n = model.store.get(wid).numel();
    model.store.set(wid, vec![0.0; n]).unwrap();
    if let Some(b) = w_m.bias() {
        let n = model.store.get(b).numel();
        model.store.set(b, vec![0.0; n]).unwrap();
    }
    no_grad(|| {
        let v = model.vlad(Direction::L2R);
        let mem = v.prepare(&model.store, &fmap).unwrap();
        let s0 = v.initial_state(&mem, model.vocab.bos());
        let step = v.decode_step(&model.store, &s0, &mem).unwrap();
        assert!(step.gate.data().iter().all(|&g| g == 0.5));
        assert_eq!(step.gate.shape()[1], v.dims().z_dim());
    });
}

#[test]
fn forced_decode_matches_manual_loop() {
    let (model, fmap) = setup(6);
    no_grad(|| {
        let v = model.vlad(Direction::L2R);
        let mem = v.prepare(&model.store, &fmap).unwrap();
        let bos = model.vocab.bos();
        let targets = [2, 7, 1, 0];
        let forced = v.forced_decode(&model.store, &mem, &targets, bos).unwrap();
        let mut state = v.initial_state(&mem, bos);
        let mut prev = bos;
        let width = model.vocab.output_size();
        for (t, &y) in targets.iter().enumerate() {
            let step = v.decode_step(&model.store, &state.with_prev(vec![prev]), &mem).unwrap();
            assert_eq!(step.dist.data(), &forced.data()[t * width..(t + 1) * width]);
            state = step.state;
            prev = y;
        }
    });
}

#[test]
fn teacher_inputs_shift_right() {
    assert_eq!(teacher_inputs(&[4, 5, 0], 9, 4).unwrap(), vec![9, 4, 5]);
    assert!(teacher_inputs(&[4, 5], 9, 4).is_err());
    assert!(teacher_inputs(&[1, 2, 3, 4, 0], 9, 4).is_err());
}

#[test]
fn batch_rows_decode_independently() {
    let cfg = tiny_config();
    let model = Vlamd::new(&cfg, 7).unwrap();
    let images = random_images(8, 2, cfg.data.height, cfg.data.width);
    no_grad(|| {
        let fmap = model.encode(&images).unwrap();
        let v = model.vlad(Direction::L2R);
        let bos = model.vocab.bos();
        let rows = vec![vec![bos, 3, 4], vec![bos, 6, 6]];
        let mem = v.prepare(&model.store, &fmap).unwrap();
        let both = v.forced_decode_batch(&model.store, &mem, &rows).unwrap();
        let width = 3 * model.vocab.output_size();
        for (b, row) in rows.iter().enumerate() {
            let one = fmap.select(b).unwrap();
            let m1 = v.prepare(&model.store, &one).unwrap();
            let y: Tensor = v.forced_decode_batch(&model.store, &m1, std::slice::from_ref(row)).unwrap();
            for (x, z) in y.data().iter().zip(&both.data()[b * width..(b + 1) * width]) {
                assert!((x - z).abs() < 1e-12);
            }
        }
    });
}
