use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlamd_tensor::gradcheck::{check, check_steps, relative_error};
use vlamd_tensor::{Result, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn rand_dist(rng: &mut ChaCha8Rng, rows: usize, v: usize) -> Tensor {
    rand_tensor(rng, &[rows, v]).scale(2.0).softmax(1).unwrap().stop_gradient()
}

/// Contracts any output with a fixed random tensor so every element matters.
fn probe(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, y.shape());
    Ok(y.mul(&w)?.sum_all())
}

fn assert_grad<F>(name: &str, f: F, inputs: &[Tensor])
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let r = check(f, inputs, H, None).unwrap();
    assert!(r.worst() < TOL, "{name}: max rel err {:?}", r.max_rel_err);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[4, 4]);
    let b = rand_tensor(&mut rng, &[4, 4]);
    let c = a.matmul(&b).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.data()[i * 4 + k] * b.data()[k * 4 + j];
            }
            assert!((c.data()[i * 4 + j] - s).abs() < 1e-14);
        }
    }
}

#[test]
fn grad_matmul_and_bmm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    assert_grad("matmul", |x| probe(&x[0].matmul(&x[1])?, 9), &[a, b]);

    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 4, 5]);
    assert_grad("bmm", |x| probe(&x[0].bmm(&x[1])?, 9), &[a, b]);

    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 5, 4]);
    assert_grad("bmm_nt", |x| probe(&x[0].bmm_nt(&x[1])?, 9), &[a, b]);

    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let bias = rand_tensor(&mut rng, &[5]);
    assert_grad("linear", |x| probe(&x[0].linear(&x[1], Some(&x[2]))?, 9), &[x, w, bias]);
}

#[test]
fn grad_broadcast_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[3, 1]);
    assert_grad("add", |x| probe(&x[0].add(&x[1])?, 1), &[a.clone(), b.clone()]);
    assert_grad("sub", |x| probe(&x[0].sub(&x[1])?, 2), &[a.clone(), b.clone()]);
    assert_grad("mul", |x| probe(&x[0].mul(&x[1])?, 3), &[a.clone(), b]);
    let c = rand_tensor(&mut rng, &[2, 1, 4]);
    assert_grad("mul-mid", |x| probe(&x[0].mul(&x[1])?, 4), &[a, c]);
}

#[test]
fn grad_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[3, 5]);
    assert_grad("sigmoid", |x| probe(&x[0].sigmoid(), 1), std::slice::from_ref(&x));
    assert_grad("tanh", |x| probe(&x[0].tanh(), 1), std::slice::from_ref(&x));
    assert_grad("exp", |x| probe(&x[0].exp(), 1), std::slice::from_ref(&x));
    assert_grad("scale", |x| probe(&x[0].scale(-2.5).add_scalar(1.0), 1), std::slice::from_ref(&x));
    assert_grad("square", |x| probe(&x[0].square(), 1), std::slice::from_ref(&x));
    // keep relu inputs away from the kink
    let xr = Tensor::new(x.data().iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v }).collect(), x.shape()).unwrap();
    assert_grad("relu", |x| probe(&x[0].relu(), 1), &[xr]);
    let pos = Tensor::new(x.data().iter().map(|v| v.abs() + 0.1).collect(), x.shape()).unwrap();
    assert_grad("ln", |x| probe(&x[0].ln_clamped(1e-12), 1), &[pos]);
}

#[test]
fn grad_softmax_every_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    for axis in 0..3 {
        let r = check(|x| probe(&x[0].softmax(axis)?, 7), std::slice::from_ref(&x), H, None).unwrap();
        // the stated bound for softmax specifically is 1e-6
        assert!(r.worst() < 1e-6, "softmax axis {axis}: {}", r.worst());
    }
}

#[test]
fn grad_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[3, 6]);
    let g = rand_tensor(&mut rng, &[6]);
    let b = rand_tensor(&mut rng, &[6]);
    assert_grad("layer_norm", |x| probe(&x[0].layer_norm(&x[1], &x[2], 1e-5)?, 2), &[x, g, b]);
}

#[test]
fn grad_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let y = rand_tensor(&mut rng, &[2, 2, 4]);
    assert_grad("reshape", |x| probe(&x[0].reshape(&[6, 4])?, 1), std::slice::from_ref(&x));
    assert_grad("permute", |x| probe(&x[0].permute(&[2, 0, 1])?, 1), std::slice::from_ref(&x));
    assert_grad("transpose", |x| probe(&x[0].transpose()?, 1), std::slice::from_ref(&x));
    assert_grad("narrow", |x| probe(&x[0].narrow(1, 1, 2)?, 1), std::slice::from_ref(&x));
    assert_grad("index_select", |x| probe(&x[0].index_select(1, &[2, 0, 2, 1])?, 1), std::slice::from_ref(&x));
    assert_grad("concat", |x| probe(&Tensor::concat(&[x[0].clone(), x[1].clone()], 1)?, 1), &[x, y]);
    let table = rand_tensor(&mut rng, &[5, 3]);
    assert_grad("embedding", |x| probe(&x[0].embedding(&[4, 1, 4])?, 1), &[table]);
}

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 2, 5, 6]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    assert_grad("conv2d_stride2", |x| probe(&x[0].conv2d_stride2(&x[1], &x[2])?, 3), &[x, w, b]);
}

#[test]
fn grad_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = rand_dist(&mut rng, 4, 5);
    let q = rand_dist(&mut rng, 4, 5);
    assert_grad("cross_entropy", |x| x[0].cross_entropy(&[0, 4, 2, 2]), std::slice::from_ref(&p));
    assert_grad("kl_div", |x| x[0].kl_div(&x[1]), &[p, q]);
    // through softmax, as used by the model
    let logits = rand_tensor(&mut rng, &[4, 5]);
    assert_grad("softmax+ce", |x| x[0].softmax(1)?.cross_entropy(&[1, 2, 3, 4]), &[logits]);
}

#[test]
fn cross_entropy_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = rand_dist(&mut rng, 6, 7);
    let targets = [0, 6, 3, 3, 1, 5];
    let mut expect = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        expect -= p.data()[r * 7 + t].ln();
    }
    expect /= 6.0;
    assert!((p.cross_entropy(&targets).unwrap().item() - expect).abs() < 1e-14);
}

#[test]
fn repeated_backward_accumulates() {
    let x = Tensor::param(vec![1.5, -2.0], &[2]).unwrap();
    let loss = x.square().sum_all();
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![6.0, -8.0]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn diamond_graph_sums_both_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[3, 3]);
    assert_grad(
        "diamond",
        |x| {
            let a = x[0].tanh();
            let b = x[0].sigmoid();
            probe(&a.matmul(&b)?.add(&x[0])?, 5)
        },
        &[x],
    );
}

#[test]
fn stop_gradient_blocks_exactly() {
    let x = Tensor::param(vec![0.3, -1.2, 2.0], &[3]).unwrap();
    x.stop_gradient().sum_all().backward().unwrap();
    assert!(x.grad_or_zeros().iter().all(|&g| g.to_bits() == 0));

    let y = x.mul(&x.stop_gradient()).unwrap().sum_all();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), x.to_vec());
}

#[test]
fn step_ladder_sidesteps_nearby_kink() {
    // relu kink 3e-6 away from the probe point
    let x = Tensor::new(vec![3e-6, 0.5], &[2]).unwrap();
    let f = |x: &[Tensor]| Ok(x[0].relu().mul(&x[0].add_scalar(1.0))?.sum_all());
    let single = check(f, std::slice::from_ref(&x), 1e-5, None).unwrap();
    assert!(single.worst() > 1e-2);
    let ladder = check_steps(f, &[x], &[1e-5, 1e-6, 1e-7], 1e-5, None).unwrap();
    assert!(ladder.worst() < 1e-6, "{:?}", ladder.max_rel_err);
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!(relative_error(1e-12, 0.0) < 1e-6);
    assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..6) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::new(values[..rows * cols].to_vec(), &[rows, cols]).unwrap();
        let y = x.softmax(1).unwrap();
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_stays_in_open_interval(values in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let n = values.len();
        let y = Tensor::new(values, &[n]).unwrap().sigmoid();
        prop_assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
