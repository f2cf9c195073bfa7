use pcc_autograd::gradcheck::{check, CheckOptions};
use pcc_autograd::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Values kept at least 0.1 away from zero so relu never sits on its kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
    .unwrap()
}

fn assert_ok(name: &str, r: pcc_autograd::gradcheck::CheckReport) {
    assert!(r.passed(1e-4), "{name}: {r:?}");
    assert_eq!(r.skipped_kinks, 0, "{name}: unexpected kink skips");
}

#[test]
fn matmul_batched_and_shared() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let opts = CheckOptions::default();
    let inputs = [random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2, 4, 5])];
    let r = check(&inputs, |_, v| Ok(v[0].matmul(v[1])?.relu().sum()), &opts);
    // relu may touch zero only with measure-zero probability here
    assert!(r.unwrap().passed(1e-4));
    let inputs = [random(&mut rng, &[2, 3, 4]), random(&mut rng, &[4, 5])];
    let r = check(&inputs, |_, v| Ok(v[0].matmul(v[1])?.tanh().sum()), &opts).unwrap();
    assert_ok("matmul shared", r);
}

#[test]
fn sum_of_product_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])];
    let r = check(
        &inputs,
        |_, v| Ok(v[0].matmul(v[1])?.sum()),
        &CheckOptions::default(),
    )
    .unwrap();
    assert_ok("sum(AB)", r);
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opts = CheckOptions::default();
    let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[4])];
    let r = check(
        &inputs,
        |_, v| {
            let a = v[0].add(v[1])?;
            let b = v[0].sub(v[1])?;
            Ok(a.mul(b)?
                .mul(v[0])?
                .scale(0.7)
                .add_scalar(0.3)
                .sigmoid()
                .sum())
        },
        &opts,
    )
    .unwrap();
    assert_ok("add/sub/mul", r);
    let inputs = [away_from_zero(&mut rng, &[5, 3])];
    let r = check(&inputs, |_, v| Ok(v[0].relu().mul(v[0])?.sum()), &opts).unwrap();
    assert_ok("relu", r);
}

#[test]
fn gelu_derivative_at_half() {
    let x = Tensor::new(&[1], vec![0.5]).unwrap();
    let r = check(&[x], |_, v| Ok(v[0].gelu().sum()), &CheckOptions::default()).unwrap();
    let (_, _, a, n) = r.worst.unwrap();
    assert!((a - n).abs() < 1e-6, "{a} vs {n}");
}

#[test]
fn softmax_jvp() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [random(&mut rng, &[3, 5]), random(&mut rng, &[3, 5])];
    for axis in 0..2 {
        let r = check(
            &inputs,
            |_, v| Ok(v[0].scale(3.0).softmax(axis)?.mul(v[1])?.sum()),
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "axis {axis}: {r:?}");
    }
}

#[test]
fn reduce_max_random_5x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random(&mut rng, &[5, 4]), random(&mut rng, &[4])];
    let r = check(
        &inputs,
        |_, v| Ok(v[0].reduce_max(0)?.mul(v[1])?.sum()),
        &CheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [
        random(&mut rng, &[3, 4]),
        random(&mut rng, &[3, 2]),
        random(&mut rng, &[6, 4]),
        random(&mut rng, &[4]),
        random(&mut rng, &[4]),
    ];
    let r = check(
        &inputs,
        |_, v| {
            let c = Var::concat(&[v[0], v[1]], 1)?; // 3x6
            let g = c.gather(&[2, 0, 2, 1], 0)?; // 4x6
            let p = g.permute(&[1, 0])?; // 6x4
            let prod = p.mul(v[2])?;
            let ln = prod.layer_norm(v[3], v[4], 1e-5)?;
            let r = ln.reshape(&[3, 2, 4])?.sum_axis(1)?; // 3x4
            let n = r.row_norm()?; // 3
            Ok(n.tanh().sum().add(r.mean_axis(0)?.sum())?)
        },
        &CheckOptions::default(),
    )
    .unwrap();
    assert_ok("structural", r);
}

#[test]
fn attention_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [random(&mut rng, &[2, 5, 3]), random(&mut rng, &[2, 5, 3])];
    let r = check(
        &inputs,
        |_, v| {
            let logits = v[0].matmul(v[1].transpose()?)?;
            let w = logits.softmax(2)?;
            Ok(w.matmul(v[1])?.mul(v[0])?.sum())
        },
        &CheckOptions::default(),
    )
    .unwrap();
    assert_ok("attention", r);
}
