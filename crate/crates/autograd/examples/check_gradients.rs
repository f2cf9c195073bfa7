//! Verifies the tape gradient of a small two-layer network with softmax
//! cross-entropy against finite differences.
//!
//! `cargo run --release -p pcc-autograd --example check_gradients`

use pcc_autograd::gradcheck::{check, CheckOptions};
use pcc_autograd::Tensor;

fn main() -> pcc_autograd::Result<()> {
    let wave = |k: f64| move |i: usize| ((i as f64 + 1.0) * k).sin();
    let inputs = [
        Tensor::from_fn(&[5, 3], wave(0.7))?,
        Tensor::from_fn(&[3, 8], wave(1.3))?,
        Tensor::from_fn(&[8], wave(0.4))?,
        Tensor::from_fn(&[8, 4], wave(2.1))?,
    ];
    let targets = Tensor::from_fn(&[5, 4], |i| if i % 4 == (i / 4) % 4 { 1.0 } else { 0.0 })?;
    let report = check(
        &inputs,
        |tape, v| {
            let h = v[0].matmul(v[1])?.add(v[2])?.gelu();
            let probs = h.matmul(v[3])?.softmax(1)?;
            let picked = probs.mul(tape.constant(targets.clone()))?.sum_axis(1)?;
            Ok(picked.neg().add_scalar(1.0).mean())
        },
        &CheckOptions::default(),
    )?;
    println!(
        "checked {} coordinates, {} skipped as kinks, max relative error {:.2e}",
        report.checked, report.skipped_kinks, report.max_rel_error
    );
    println!("{}", if report.passed(1e-4) { "PASS" } else { "FAIL" });
    Ok(())
}
