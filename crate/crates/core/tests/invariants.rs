mod common;

use common::*;
use pcc::data::{substream, Primitive};
use pcc::geometry::{farthest_point_sample, knn, sample_gaussian_sphere};
use pcc::metrics::{chamfer, fscore, CdNorm};
use pcc::model::corres::top_k;
use pcc::model::Provenance;
use pcc::train::cosine_lr;
use pcc::{ForwardSeeds, Model, ModelConfig, PointCloud};
use pcc_autograd::Tape;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn shifted(pc: &PointCloud, v: [f32; 3]) -> PointCloud {
    PointCloud::new(
        pc.points()
            .iter()
            .map(|p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]])
            .collect(),
    )
    .unwrap()
}

fn scaled(pc: &PointCloud, s: f32) -> PointCloud {
    PointCloud::new(pc.points().iter().map(|p| p.map(|c| c * s)).collect()).unwrap()
}

fn permuted(pc: &PointCloud, seed: u64) -> PointCloud {
    let mut idx: Vec<usize> = (0..pc.len()).collect();
    idx.shuffle(&mut rng(seed));
    pc.select(&idx).unwrap()
}

fn shape_partial(n: usize, seed: u64) -> PointCloud {
    Primitive::named(Primitive::NAMES[(seed % 5) as usize])
        .unwrap()
        .sample_surface(n, &mut rng(seed))
        .unwrap()
}

fn bits(t: &pcc_autograd::Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sphere_points_are_unit(n in 1usize..2000, seed in any::<u64>()) {
        let s = sample_gaussian_sphere(n, seed).unwrap();
        prop_assert_eq!(s.len(), n);
        for p in s.points() {
            let r = p.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((r - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn fps_ignores_duplicates_of_selected(seed in any::<u64>(), n in 2usize..64, m in 1usize..64) {
        let pc = random_cloud(n, &mut rng(seed));
        let m = m.min(n);
        let sel = farthest_point_sample(&pc, m, 0).unwrap();
        let mut pts = pc.points().to_vec();
        pts.extend(sel.iter().map(|&i| pc.get(i)));
        let extended = PointCloud::new(pts).unwrap();
        prop_assert_eq!(farthest_point_sample(&extended, m, 0).unwrap(), sel);
    }

    #[test]
    fn knn_is_translation_invariant(seed in any::<u64>(), n in 1usize..64, q in 1usize..32,
                                    k in 1usize..64, shift in prop::array::uniform3(-8i32..=8)) {
        // Lattice coordinates and lattice shifts keep every distance exact.
        let refs = lattice_cloud(n, &mut rng(seed));
        let queries = lattice_cloud(q, &mut rng(seed ^ 5));
        let v = shift.map(|s| s as f32 * 0.25);
        let k = k.min(n);
        let a = knn(&queries, &refs, k).unwrap();
        let b = knn(&shifted(&queries, v), &shifted(&refs, v), k).unwrap();
        prop_assert_eq!(a.as_flat(), b.as_flat());
    }

    #[test]
    fn chamfer_symmetry_permutation_and_scale(seed in any::<u64>(), n in 1usize..64, m in 1usize..64) {
        let p = random_cloud(n, &mut rng(seed));
        let g = random_cloud(m, &mut rng(seed ^ 7));
        for norm in [CdNorm::L1, CdNorm::L2] {
            let d = chamfer(&p, &g, norm).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!((d - chamfer(&g, &p, norm).unwrap()).abs() <= 1e-12);
            let pp = chamfer(&permuted(&p, seed), &permuted(&g, seed ^ 1), norm).unwrap();
            prop_assert!((d - pp).abs() <= 1e-12);
            let s = chamfer(&scaled(&p, 2.0), &scaled(&g, 2.0), norm).unwrap();
            let factor = if norm == CdNorm::L1 { 2.0 } else { 4.0 };
            prop_assert!((s - factor * d).abs() <= 1e-12 * (1.0 + s));
        }
        let f = fscore(&p, &g, 0.3).unwrap();
        prop_assert_eq!(f, fscore(&permuted(&p, 3), &permuted(&g, 4), 0.3).unwrap());
        prop_assert_eq!(f, fscore(&g, &p, 0.3).unwrap());
    }

    #[test]
    fn top_k_selects_the_same_set_under_permutation(scores in prop::collection::hash_set(-1000i32..1000, 1..80),
                                                     k in 1usize..80, seed in any::<u64>()) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let k = k.min(scores.len());
        let mut perm: Vec<usize> = (0..scores.len()).collect();
        perm.shuffle(&mut rng(seed));
        let shuffled: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let mut a: Vec<i64> = top_k(&scores, k).iter().map(|&i| scores[i] as i64).collect();
        let mut b: Vec<i64> = top_k(&shuffled, k).iter().map(|&i| shuffled[i] as i64).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn substreams_are_pure(seed in any::<u64>()) {
        prop_assert_eq!(substream(seed, "data"), substream(seed, "data"));
        prop_assert_ne!(substream(seed, "data"), substream(seed, "init"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn model_pipeline_invariants(seed in any::<u64>(), n in 10usize..120, init in 0u64..4) {
        let m = Model::<f64>::new(ModelConfig::tiny(), init).unwrap();
        let cfg = &m.config;
        let pc = shape_partial(n, seed);
        let tape = Tape::new();
        let pred = m.forward(&tape, &pc, ForwardSeeds::EVAL).unwrap();
        prop_assert_eq!(pred.encoded.features.shape(), vec![cfg.tokens, cfg.width]);
        prop_assert_eq!(pred.dense.shape(), vec![cfg.dense_points(), 3]);

        let pool = pred.pool.as_ref().unwrap();
        let n_template = pool.provenance.iter().filter(|&&s| s == Provenance::Template).count();
        let n_input = pool.provenance.iter().filter(|&&s| s == Provenance::Input).count();
        prop_assert_eq!(n_template + n_input, cfg.pool_size());

        let raw: Vec<[u64; 3]> = pc.points().iter().map(|q| q.map(|c| (c as f64).to_bits())).collect();
        let fine = pred.fine.value();
        for (i, prov) in pred.fine_provenance.iter().enumerate() {
            if *prov == Provenance::Input {
                let r = fine.row(i);
                prop_assert!(raw.contains(&[r[0].to_bits(), r[1].to_bits(), r[2].to_bits()]));
            }
        }

        // Zero-initialized folding head: the dense cloud is the fine template repeated.
        let dense = pred.dense.value();
        for j in 0..dense.shape()[0] {
            prop_assert_eq!(dense.row(j), fine.row(j / cfg.up_factor));
        }
    }

    #[test]
    fn coarse_template_ignores_input_order(seed in any::<u64>(), n in 20usize..100) {
        let m = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        let pc = random_cloud(n, &mut rng(seed));
        let mut perm: Vec<usize> = (1..n).collect();
        perm.shuffle(&mut rng(seed ^ 9));
        perm.insert(0, 0);
        let (t1, t2) = (Tape::new(), Tape::new());
        let a = m.forward(&t1, &pc, ForwardSeeds::EVAL).unwrap();
        let b = m.forward(&t2, &pc.select(&perm).unwrap(), ForwardSeeds::EVAL).unwrap();
        prop_assert_eq!(bits(&a.coarse.value()), bits(&b.coarse.value()));
    }
}

#[test]
fn cosine_endpoints_are_exact() {
    for (base, min, total) in [(1e-4, 1e-6, 2000), (0.3, 0.0, 7), (1.0, 0.5, 1)] {
        assert_eq!(cosine_lr(0, total, base, min).unwrap(), base);
        assert_eq!(cosine_lr(total, total, base, min).unwrap(), min);
    }
}

#[test]
fn up_factor_sets_dense_count() {
    for (up, want) in [(4, 2048), (16, 8192), (32, 16384)] {
        let cfg = ModelConfig {
            up_factor: up,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.dense_points(), want);
    }
}
