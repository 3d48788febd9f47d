use vlamd_core::selfcheck::{lambda_zero_check, stop_gradient_check, tiny_batch, tiny_config};
use vlamd_core::trainer::{
    forward_heads, kl_to_reversed, main_loss, mutual_loss, reverse_stop, sequence_ce, total_loss, Alignment, BatchTargets,
};
use vlamd_core::{Direction, Vlamd, Vocab};
use vlamd_tensor::{no_grad, Tensor};

fn dist(rows: &[&[f64]]) -> Vec<f64> {
    rows.iter()
        .flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |x| x / s)
        })
        .collect()
}

#[test]
fn sequence_ce_hand_computed() {
    // two samples, T = 2, V = 3; sample 1 has one valid row
    let y = Tensor::new(dist(&[&[1.0, 2.0, 1.0], &[3.0, 1.0, 0.0], &[1.0, 1.0, 2.0], &[1.0, 1.0, 1.0]]), &[2, 2, 3]).unwrap();
    let align = Alignment::new(vec![2, 1]).unwrap();
    let ce = sequence_ce(&y, &[1, 0, 2, 0], &align).unwrap().item();
    let want = -(0.5f64.ln() / 4.0 + 0.75f64.ln() / 4.0 + 0.5f64.ln() / 2.0);
    assert!((ce - want).abs() < 1e-12, "{ce} vs {want}");
}

#[test]
fn reverse_keeps_eos_row_in_place() {
    let rows: Vec<f64> = (0..8).map(f64::from).collect();
    let y = Tensor::new(rows, &[2, 4, 1]).unwrap();
    let align = Alignment::new(vec![4, 2]).unwrap();
    let r = reverse_stop(&y, &align).unwrap();
    assert_eq!(r.data(), &[2.0, 1.0, 0.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
}

#[test]
fn mutual_loss_hand_computed() {
    // one sample "xy" + EOS: T = 3, V = 2
    let p_rows = [[0.6, 0.4], [0.3, 0.7], [0.9, 0.1]];
    let q_rows = [[0.2, 0.8], [0.5, 0.5], [0.8, 0.2]];
    let p = Tensor::new(p_rows.iter().flatten().copied().collect(), &[1, 3, 2]).unwrap();
    let q = Tensor::new(q_rows.iter().flatten().copied().collect(), &[1, 3, 2]).unwrap();
    let align = Alignment::new(vec![3]).unwrap();
    let kl = |a: &[f64; 2], b: &[f64; 2]| -> f64 { a.iter().zip(b).map(|(x, y)| x * (x / y).ln()).sum() };
    // RS swaps the two content rows and keeps EOS
    let pq = (kl(&p_rows[0], &q_rows[1]) + kl(&p_rows[1], &q_rows[0]) + kl(&p_rows[2], &q_rows[2])) / 3.0;
    let qp = (kl(&q_rows[0], &p_rows[1]) + kl(&q_rows[1], &p_rows[0]) + kl(&q_rows[2], &p_rows[2])) / 3.0;
    let got = kl_to_reversed(&p, &q, &align).unwrap().item();
    assert!((got - pq).abs() < 1e-12);
    let both = mutual_loss(&p, &q, &align).unwrap().item();
    assert!((both - (pq + qp)).abs() < 1e-12);
}

#[test]
fn mutual_loss_vanishes_on_mirrored_predictions() {
    let p_rows = [[0.6, 0.4], [0.3, 0.7], [0.9, 0.1]];
    let mirrored = [p_rows[1], p_rows[0], p_rows[2]];
    let p = Tensor::new(p_rows.iter().flatten().copied().collect(), &[1, 3, 2]).unwrap();
    let q = Tensor::new(mirrored.iter().flatten().copied().collect(), &[1, 3, 2]).unwrap();
    let align = Alignment::new(vec![3]).unwrap();
    assert!(mutual_loss(&p, &q, &align).unwrap().item().abs() < 1e-15);
}

#[test]
fn batch_targets_align_on_eos() {
    let vocab = Vocab::new("abc").unwrap();
    let bt = BatchTargets::new(&[vec![1, 2, 3], vec![2]], &vocab).unwrap();
    assert_eq!(bt.align.lengths(), &[4, 2]);
    assert_eq!(bt.targets(Direction::L2R), &[1, 2, 3, 0, 2, 0, 0, 0]);
    assert_eq!(bt.targets(Direction::R2L), &[3, 2, 1, 0, 2, 0, 0, 0]);
    let (bos, pad) = (vocab.bos(), vocab.pad());
    assert_eq!(bt.inputs(Direction::L2R), &[vec![bos, 1, 2, 3], vec![bos, 2, pad, pad]]);
    assert_eq!(bt.inputs(Direction::R2L), &[vec![bos, 3, 2, 1], vec![bos, 2, pad, pad]]);
    assert!(BatchTargets::new(&[vec![]], &vocab).is_ok());
    assert!(BatchTargets::new(&[], &vocab).is_err());
}

#[test]
fn total_is_linear_in_lambda() {
    let model = Vlamd::new(&tiny_config(), 3).unwrap();
    let (images, bt) = tiny_batch(&model, 4).unwrap();
    let heads = no_grad(|| forward_heads(&model, &images, &bt)).unwrap();
    let (main, _) = main_loss(&heads, &bt).unwrap();
    let mut reports = Vec::new();
    for lambda in [0.0, 0.4, 1.0] {
        let (t, r) = total_loss(&heads, &bt, lambda).unwrap();
        assert!((t.item() - r.recombine(lambda)).abs() < 1e-12);
        assert!((r.main() - main.item()).abs() < 1e-12);
        reports.push(r);
    }
    assert_eq!(reports[0].total, main.item());
    assert!(reports[1].kl_vlad > 0.0 && reports[1].kl_transd > 0.0);
}

#[test]
fn stop_gradient_is_exact() {
    let r = stop_gradient_check().unwrap();
    assert!(r.passed, "{}", r.line());
}

#[test]
fn lambda_zero_gradients_are_bit_equal() {
    let r = lambda_zero_check().unwrap();
    assert!(r.passed, "{}", r.line());
}

#[test]
fn lambda_changes_gradients_when_positive() {
    let model = Vlamd::new(&tiny_config(), 5).unwrap();
    let (images, bt) = tiny_batch(&model, 6).unwrap();
    let grads = |lambda: f64| {
        model.store.zero_grad();
        let heads = forward_heads(&model, &images, &bt).unwrap();
        total_loss(&heads, &bt, lambda).unwrap().0.backward().unwrap();
        model.store.iter().map(|(_, t)| t.grad_or_zeros()).collect::<Vec<_>>()
    };
    assert_ne!(grads(0.0), grads(0.5));
}
