//! Fits `y = x w + b` to noisy synthetic data with plain gradient descent.
//!
//! `cargo run --release -p pcc-autograd --example linear_regression`

use pcc_autograd::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pcc_autograd::Result<()> {
    let (n, d) = (256, 4);
    let true_w = [1.5, -2.0, 0.5, 3.0];
    let true_b = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0))?;
    let y = Tensor::from_fn(&[n, 1], |i| {
        let row = x.row(i);
        let clean: f64 = row.iter().zip(true_w).map(|(a, w)| a * w).sum::<f64>() + true_b;
        clean + rng.random_range(-0.01..0.01)
    })?;

    let mut params = ParamStore::new();
    let w = params.add("w", Tensor::zeros(&[d, 1])?)?;
    let b = params.add("b", Tensor::zeros(&[1])?)?;
    let lr = 0.5;
    for step in 0..200 {
        let tape = Tape::new();
        let p = params.bind(&tape);
        let pred = tape.constant(x.clone()).matmul(p.var(w))?.add(p.var(b))?;
        let err = pred.sub(tape.constant(y.clone()))?;
        let loss = err.mul(err)?.mean();
        let mut grads = tape.backward(loss)?;
        for (id, g) in params
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .zip(p.collect(&mut grads))
        {
            let g = g.expect("every parameter affects the loss");
            for (v, g) in params.get_mut(id).data_mut().iter_mut().zip(g) {
                *v -= lr * g;
            }
        }
        if step % 50 == 0 {
            println!("step {step:3}  mse {:.6}", loss.item());
        }
    }
    println!("w = {:?}", params.get(w).data());
    println!("b = {:?}", params.get(b).data());
    Ok(())
}
