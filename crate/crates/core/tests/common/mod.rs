//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use pcc::geometry::Point;
use pcc::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0f32..1.0)))
            .collect(),
    )
    .unwrap()
}

/// Cloud whose coordinates sit on a coarse lattice, so ties are common.
pub fn lattice_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [0, 1, 2].map(|_| rng.random_range(-3i32..=3) as f32 * 0.25))
            .collect(),
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

fn widen(p: &Point) -> [f64; 3] {
    p.map(f64::from)
}

/// FPS by recomputing every candidate's distance to the whole selected set.
pub fn fps_oracle(pc: &PointCloud, m: usize, start: usize) -> Vec<usize> {
    let pts: Vec<[f64; 3]> = pc.points().iter().map(widen).collect();
    let mut sel = vec![start];
    while sel.len() < m {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = sel
                .iter()
                .map(|&s| d2(p, &pts[s]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        sel.push(best);
    }
    sel
}

/// kNN by fully sorting every (distance, index) pair.
pub fn knn_oracle(queries: &[Vec<f64>], refs: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    queries
        .iter()
        .map(|q| {
            let mut all: Vec<(f64, usize)> = refs
                .iter()
                .enumerate()
                .map(|(j, r)| (d2(q, r), j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|x| x.1).collect()
        })
        .collect()
}

pub fn rows(pc: &PointCloud) -> Vec<Vec<f64>> {
    pc.points().iter().map(|p| widen(p).to_vec()).collect()
}

fn nearest_sq(a: &PointCloud, b: &PointCloud) -> Vec<f64> {
    a.points()
        .iter()
        .map(|p| {
            b.points()
                .iter()
                .map(|q| d2(&widen(p), &widen(q)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Chamfer distance; `squared` selects the squared-distance convention.
pub fn chamfer_oracle(p: &PointCloud, g: &PointCloud, squared: bool) -> f64 {
    let mean = |v: Vec<f64>| {
        let n = v.len() as f64;
        v.into_iter()
            .map(|d| if squared { d } else { d.sqrt() })
            .sum::<f64>()
            / n
    };
    mean(nearest_sq(p, g)) + mean(nearest_sq(g, p))
}

pub fn fscore_oracle(p: &PointCloud, g: &PointCloud, tau: f64) -> f64 {
    let frac = |v: Vec<f64>| {
        let n = v.len() as f64;
        v.iter().filter(|d| d.sqrt() < tau).count() as f64 / n
    };
    let (pr, rc) = (frac(nearest_sq(p, g)), frac(nearest_sq(g, p)));
    if pr + rc == 0.0 {
        0.0
    } else {
        2.0 * pr * rc / (pr + rc)
    }
}
