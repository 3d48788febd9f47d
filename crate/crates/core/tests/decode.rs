use vlamd_core::decode::{co_beam_search, force_score, log_prob, mutual_redecode, recognize_with_report, Prepared};
use vlamd_core::selfcheck::{beam_enumeration, random_images, score_consistency, tiny_config};
use vlamd_core::{Direction, Vlamd, Vocab};
use vlamd_tensor::no_grad;

fn prepared(model: &Vlamd, seed: u64) -> (vlamd_core::backbone::FeatureMap, Prepared) {
    let c = &model.config.data;
    let image = random_images(seed, 1, c.height, c.width);
    let fmap = no_grad(|| model.encode(&image)).unwrap();
    let prep = Prepared::new(model, &fmap).unwrap();
    (fmap, prep)
}

#[test]
fn log_prob_is_clamped() {
    assert_eq!(log_prob(1.0), 0.0);
    assert!((log_prob(0.0) - 1e-12f64.ln()).abs() < 1e-12);
}

#[test]
fn alpha_one_ignores_transd_weights() {
    let mut cfg = tiny_config();
    cfg.set("decode.alpha", "1").unwrap();
    let model = Vlamd::new(&cfg, 1).unwrap();
    let mut perturbed = model.clone();
    let ids: Vec<_> = perturbed
        .store
        .ids()
        .filter(|&id| perturbed.store.name(id).starts_with("transd."))
        .collect();
    for id in ids {
        let data: Vec<f64> = perturbed.store.get(id).data().iter().map(|x| x * -3.0 + 0.1).collect();
        perturbed.store.set(id, data).unwrap();
    }
    let (_, p0) = prepared(&model, 2);
    let (_, p1) = prepared(&perturbed, 2);
    for dir in Direction::BOTH {
        let a = co_beam_search(&model, &p0, &cfg.decode, dir).unwrap();
        let b = co_beam_search(&perturbed, &p1, &cfg.decode, dir).unwrap();
        let ta: Vec<_> = a.entries.iter().map(|h| (h.tokens.clone(), h.logp_joint)).collect();
        let tb: Vec<_> = b.entries.iter().map(|h| (h.tokens.clone(), h.logp_joint)).collect();
        assert_eq!(ta, tb);
        assert_ne!(a.entries[0].logp_transd, b.entries[0].logp_transd);
    }
}

#[test]
fn nbest_is_sorted_and_bounded() {
    let cfg = tiny_config();
    let model = Vlamd::new(&cfg, 3).unwrap();
    let (_, prep) = prepared(&model, 4);
    for dir in Direction::BOTH {
        let list = co_beam_search(&model, &prep, &cfg.decode, dir).unwrap();
        assert!(!list.entries.is_empty() && list.entries.len() <= cfg.decode.n_best);
        for w in list.entries.windows(2) {
            assert!(w[0].logp_joint >= w[1].logp_joint);
        }
        for h in &list.entries {
            assert!(h.tokens.len() <= cfg.decode.max_len);
            if h.finished {
                assert_eq!(h.tokens.last(), Some(&Vocab::EOS));
                assert!(!h.content().contains(&Vocab::EOS));
            }
        }
    }
}

#[test]
fn beam_scores_match_forced_scores() {
    let r = score_consistency(4).unwrap();
    assert!(r.passed, "{}", r.line());
}

#[test]
fn exhaustive_beam_matches_brute_force() {
    let r = beam_enumeration(4).unwrap();
    assert!(r.passed, "{}", r.line());
}

#[test]
fn redecode_report_recombines() {
    let cfg = tiny_config();
    let model = Vlamd::new(&cfg, 5).unwrap();
    let (fmap, prep) = prepared(&model, 6);
    let (best, report) = mutual_redecode(&model, &fmap, &cfg.decode).unwrap();
    assert_eq!(report.candidates[0].content, best);
    for c in &report.candidates {
        assert!((c.logp_l2r + c.logp_r2l_reversed - c.combined).abs() < 1e-12);
        let mut l2r = c.content.clone();
        l2r.push(Vocab::EOS);
        let mut r2l: Vec<usize> = c.content.iter().rev().copied().collect();
        r2l.push(Vocab::EOS);
        let a = force_score(&model, &prep, &l2r, cfg.decode.alpha, Direction::L2R).unwrap();
        let b = force_score(&model, &prep, &r2l, cfg.decode.alpha, Direction::R2L).unwrap();
        assert!((a.joint - c.logp_l2r).abs() < 1e-12);
        assert!((b.joint - c.logp_r2l_reversed).abs() < 1e-12);
    }
    let mut seen = std::collections::HashSet::new();
    assert!(report.candidates.iter().all(|c| seen.insert(c.content.clone())));
    assert_eq!(report.lines().len(), report.candidates.len());
}

#[test]
fn length_norm_divides_by_token_count() {
    let mut cfg = tiny_config();
    let model = Vlamd::new(&cfg, 7).unwrap();
    let image = random_images(8, 1, cfg.data.height, cfg.data.width).reshape(&[3, 16, 32]).unwrap();
    let (_, plain) = recognize_with_report(&model, &image, &cfg.decode).unwrap();
    cfg.set("decode.length_norm", "true").unwrap();
    let (_, normed) = recognize_with_report(&model, &image, &cfg.decode).unwrap();
    for c in &normed.candidates {
        let p = plain.candidates.iter().find(|p| p.content == c.content).unwrap();
        assert!((p.combined / (c.content.len() + 1) as f64 - c.combined).abs() < 1e-12);
    }
}

#[test]
fn batched_feature_maps_are_rejected() {
    let cfg = tiny_config();
    let model = Vlamd::new(&cfg, 9).unwrap();
    let images = random_images(10, 2, cfg.data.height, cfg.data.width);
    let fmap = no_grad(|| model.encode(&images)).unwrap();
    assert!(Prepared::new(&model, &fmap).is_err());
}
