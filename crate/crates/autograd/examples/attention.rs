//! One head of scaled dot-product self-attention: forward pass, backward
//! pass, and the gradient norm reaching each projection.
//!
//! `cargo run --release -p pcc-autograd --example attention`

use pcc_autograd::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pcc_autograd::Result<()> {
    let (tokens, width) = (16, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut uniform = |shape: &[usize], bound: f64| {
        Tensor::<f32>::from_fn(shape, |_| rng.random_range(-bound..bound) as f32)
    };
    let x = uniform(&[tokens, width], 1.0)?;
    let bound = 1.0 / (width as f64).sqrt();
    let mut params = ParamStore::new();
    for name in ["q", "k", "v"] {
        params.add(name, uniform(&[width, width], bound)?)?;
    }
    let ids: Vec<_> = params.ids().collect();

    let tape = Tape::new();
    let p = params.bind(&tape);
    let x = tape.constant(x);
    let [q, k, v] = [0, 1, 2].map(|i| x.matmul(p.var(ids[i])));
    let scores = q?.matmul(k?.transpose()?)?.scale(bound as f32);
    let attended = scores.softmax(1)?.matmul(v?)?;
    let loss = attended.mul(attended)?.mean();
    println!(
        "output shape {:?}, loss {:.6}",
        attended.shape(),
        loss.item()
    );

    let mut grads = tape.backward(loss)?;
    for (id, g) in ids.iter().zip(p.collect(&mut grads)) {
        let g = g.unwrap_or_default();
        let norm = g.iter().map(|v| v * v).sum::<f32>().sqrt();
        println!("d loss / d {}: norm {norm:.6}", params.name(*id));
    }
    println!(
        "second backward on the same tape: {}",
        tape.backward(loss).unwrap_err()
    );
    Ok(())
}
