//! Farthest point sampling, coordinate and feature kNN, and the grid index.

use std::time::Instant;

use pcc::data::Primitive;
use pcc::geometry::{farthest_point_sample, knn, knn_features, sample_gaussian_sphere, GridIndex};
use pcc_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pcc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cloud = Primitive::named("cone")?.sample_surface(8192, &mut rng)?;

    let t = Instant::now();
    let anchors = cloud.select(&farthest_point_sample(&cloud, 128, 0)?)?;
    println!("fps 8192 -> 128 in {:.1?}", t.elapsed());

    let t = Instant::now();
    let brute = knn(&anchors, &cloud, 16)?;
    let brute_time = t.elapsed();
    let t = Instant::now();
    let grid = GridIndex::new(&cloud).knn(&anchors, 16)?;
    println!(
        "knn k=16: brute {brute_time:.1?}, grid {:.1?}, identical {}",
        t.elapsed(),
        brute == grid
    );
    println!("neighbors of anchor 0: {:?}", brute.row(0));

    let features = Tensor::<f32>::from_fn(&[128, 32], |i| ((i * 7919 % 101) as f32).sin())?;
    let fk = knn_features(&features, &features, 4)?;
    println!("feature-space neighbors of token 0: {:?}", fk.row(0));

    let sphere = sample_gaussian_sphere(512, 9)?;
    let worst = sphere
        .points()
        .iter()
        .map(|p| (p.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    println!("gaussian sphere: 512 points, max | |p| - 1 | = {worst:.2e}");
    Ok(())
}
