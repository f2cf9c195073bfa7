//! Chamfer distances and F-Score between a shape and perturbed copies of it.

use pcc::data::Primitive;
use pcc::metrics::{sample_metrics, MetricsReport};
use pcc::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn jitter(pc: &PointCloud, sigma: f32, rng: &mut ChaCha8Rng) -> pcc::Result<PointCloud> {
    PointCloud::new(
        pc.points()
            .iter()
            .map(|p| p.map(|c| c + sigma * rng.random_range(-1.0f32..1.0)))
            .collect(),
    )
}

fn main() -> pcc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt = Primitive::named("torus")?.sample_surface(2048, &mut rng)?;
    let mut rows = Vec::new();
    for sigma in [0.0, 0.002, 0.005, 0.01, 0.02, 0.05] {
        let m = sample_metrics(&jitter(&gt, sigma, &mut rng)?, &gt)?;
        println!(
            "sigma {sigma:<6} CD-l1 {:.5}  CD-l2 {:.6}  F@1% {:.4}",
            m.cd_l1, m.cd_l2, m.fscore
        );
        rows.push(m);
    }
    let report = MetricsReport::from_samples(rows.into_iter().map(|m| ("torus", m)));
    print!("{}", report.to_table());
    Ok(())
}
