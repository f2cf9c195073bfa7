//! Non-differentiable point-set kernels.
//!
//! Distances are squared Euclidean, accumulated in `f64` as `(dx*dx + dy*dy) + dz*dz`
//! (generalized left to right for higher dimensions). Every kernel breaks ties
//! by the lowest index, so results are fully deterministic.

use std::cmp::Ordering;

use pcc_autograd::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

pub type Point = [f32; 3];

/// Ordered, non-empty sequence of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud("point cloud"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinitePoint(i));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn get(&self, i: usize) -> Point {
        self.points[i]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    /// Flat `x y z` coordinates widened to `f64`.
    pub fn flat_f64(&self) -> Vec<f64> {
        self.points
            .iter()
            .flat_map(|p| p.iter().map(|&c| c as f64))
            .collect()
    }

    /// `[N, 3]` tensor of the coordinates.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self
            .points
            .iter()
            .flat_map(|p| p.iter().map(|&c| T::from_f64_lossy(c as f64)))
            .collect();
        Tensor::new(&[self.points.len(), 3], data).expect("non-empty cloud")
    }

    /// Reads an `[N, 3]` tensor back into a cloud (rounding to `f32`).
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] != 3 {
            return Err(Error::InvalidArgument(format!(
                "expected an [N, 3] tensor, got {:?}",
                t.shape()
            )));
        }
        Self::new(
            t.data()
                .chunks(3)
                .map(|c| {
                    [
                        c[0].as_f64() as f32,
                        c[1].as_f64() as f32,
                        c[2].as_f64() as f32,
                    ]
                })
                .collect(),
        )
    }
}

/// `Q x k` neighbor indices; row `i` lists the neighbors of query `i` by ascending distance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    indices: Vec<usize>,
    k: usize,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn queries(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn as_flat(&self) -> &[usize] {
        &self.indices
    }

    /// Each query index repeated `k` times, aligned with [`NeighborIndex::as_flat`].
    pub fn query_repeated(&self) -> Vec<usize> {
        (0..self.queries())
            .flat_map(|q| std::iter::repeat_n(q, self.k))
            .collect()
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

fn column_distances_portable(q: &[f64], cols: &[f64], dist: &mut [f64]) {
    dist.fill(0.0);
    for (&qd, col) in q.iter().zip(cols.chunks(dist.len())) {
        for (acc, &r) in dist.iter_mut().zip(col) {
            let t = qd - r;
            *acc += t * t;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn column_distances_avx2(q: &[f64], cols: &[f64], dist: &mut [f64]) {
    column_distances_portable(q, cols, dist)
}

/// Squared distances from `q` to every reference stored column-major in `cols`.
fn column_distances(q: &[f64], cols: &[f64], dist: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2.
        return unsafe { column_distances_avx2(q, cols, dist) };
    }
    column_distances_portable(q, cols, dist)
}

/// Brute-force kNN over flat rows of width `dim`.
pub fn knn_flat(queries: &[f64], refs: &[f64], dim: usize, k: usize) -> Result<NeighborIndex> {
    if dim == 0 || queries.len() % dim != 0 || refs.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "rows are not multiples of width {dim}"
        )));
    }
    let n_ref = refs.len() / dim;
    if queries.is_empty() || n_ref == 0 {
        return Err(Error::EmptyCloud("knn"));
    }
    if k == 0 || k > n_ref {
        return Err(Error::NotEnoughPoints {
            op: "knn",
            needed: k.max(1),
            available: n_ref,
        });
    }
    let mut cols = vec![0.0; refs.len()];
    for (j, r) in refs.chunks(dim).enumerate() {
        for (d, &v) in r.iter().enumerate() {
            cols[d * n_ref + j] = v;
        }
    }
    let mut indices = Vec::with_capacity(queries.len() / dim * k);
    let mut dist = vec![0.0f64; n_ref];
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n_ref);
    for q in queries.chunks(dim) {
        column_distances(q, &cols, &mut dist);
        cand.clear();
        cand.extend(dist.iter().copied().zip(0..));
        if k < n_ref {
            cand.select_nth_unstable_by(k - 1, by_dist_then_index);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(by_dist_then_index);
        indices.extend(head.iter().map(|c| c.1));
    }
    Ok(NeighborIndex { indices, k })
}

/// Coordinate-space kNN of `queries` into `refs`. Self-matches are not excluded.
pub fn knn(queries: &PointCloud, refs: &PointCloud, k: usize) -> Result<NeighborIndex> {
    knn_flat(&queries.flat_f64(), &refs.flat_f64(), 3, k)
}

/// Feature-space kNN between rows of two `[Q, C]` / `[R, C]` tensors.
pub fn knn_features<T: Real>(
    queries: &Tensor<T>,
    refs: &Tensor<T>,
    k: usize,
) -> Result<NeighborIndex> {
    let (qd, rd) = (
        queries.shape().last().copied(),
        refs.shape().last().copied(),
    );
    if queries.rank() != 2 || refs.rank() != 2 || qd != rd {
        return Err(Error::DimensionMismatch {
            op: "knn_features",
            lhs: qd.unwrap_or(0),
            rhs: rd.unwrap_or(0),
        });
    }
    let widen = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    knn_flat(&widen(queries), &widen(refs), qd.unwrap(), k)
}

/// Exact coordinate-space kNN accelerated by a uniform grid over `refs`.
///
/// Produces the same index matrix as [`knn`]: candidate distances use the same
/// arithmetic and the same (distance, index) order.
pub struct GridIndex {
    coords: Vec<f64>,
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    members: Vec<usize>,
}

impl GridIndex {
    pub fn new(refs: &PointCloud) -> Self {
        let coords = refs.flat_f64();
        let n = refs.len();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in coords.chunks(3) {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
        let per_axis = ((n as f64) / 2.0).cbrt().max(1.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).max(1));
        let mut grid = Self {
            coords,
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            members: Vec::new(),
        };
        let n_cells = dims[0] * dims[1] * dims[2];
        let cell_of: Vec<usize> = (0..n)
            .map(|i| grid.flat_cell(grid.cell_coords(&grid.coords[i * 3..i * 3 + 3])))
            .collect();
        let mut counts = vec![0usize; n_cells + 1];
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for c in 0..n_cells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut members = vec![0; n];
        for (i, &c) in cell_of.iter().enumerate() {
            members[fill[c]] = i;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.members = members;
        grid
    }

    fn cell_coords(&self, p: &[f64]) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell).floor();
            if c < 0.0 {
                0
            } else {
                (c as usize).min(self.dims[a] - 1)
            }
        })
    }

    fn flat_cell(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn len(&self) -> usize {
        self.coords.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Distance below which every point outside the cell block `center ± ring` lies farther.
    fn outside_bound(&self, q: &[f64], center: [usize; 3], ring: usize) -> f64 {
        let mut bound = f64::INFINITY;
        for a in 0..3 {
            if center[a] >= ring + 1 {
                let wall = self.origin[a] + (center[a] - ring) as f64 * self.cell;
                bound = bound.min((q[a] - wall).max(0.0));
            }
            if center[a] + ring + 1 < self.dims[a] {
                let wall = self.origin[a] + (center[a] + ring + 1) as f64 * self.cell;
                bound = bound.min((wall - q[a]).max(0.0));
            }
        }
        bound
    }

    pub fn query(&self, q: &[f64], k: usize, out: &mut Vec<(f64, usize)>) {
        out.clear();
        let center = self.cell_coords(q);
        let max_ring = (0..3).map(|a| self.dims[a]).max().unwrap();
        for ring in 0..=max_ring {
            let lo = center.map(|c| c.saturating_sub(ring));
            let hi = [0, 1, 2].map(|a| (center[a] + ring).min(self.dims[a] - 1));
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        let on_shell = x + ring == center[0]
                            || x == center[0] + ring
                            || y + ring == center[1]
                            || y == center[1] + ring
                            || z + ring == center[2]
                            || z == center[2] + ring;
                        if !on_shell {
                            continue;
                        }
                        let c = self.flat_cell([x, y, z]);
                        for &j in &self.members[self.starts[c]..self.starts[c + 1]] {
                            out.push((sq_dist(q, &self.coords[j * 3..j * 3 + 3]), j));
                        }
                    }
                }
            }
            if out.len() >= k {
                if out.len() > k {
                    out.select_nth_unstable_by(k - 1, by_dist_then_index);
                    out.truncate(k);
                }
                let kth = out.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
                let b = self.outside_bound(q, center, ring);
                // Strict with slack: a point exactly at the bound could still win a tie.
                if b.is_infinite() || kth < b * b * (1.0 - 1e-9) {
                    break;
                }
            }
        }
        out.sort_unstable_by(by_dist_then_index);
    }

    pub fn knn(&self, queries: &PointCloud, k: usize) -> Result<NeighborIndex> {
        if k == 0 || k > self.len() {
            return Err(Error::NotEnoughPoints {
                op: "knn",
                needed: k.max(1),
                available: self.len(),
            });
        }
        let mut indices = Vec::with_capacity(queries.len() * k);
        let mut scratch = Vec::new();
        for q in queries.flat_f64().chunks(3) {
            self.query(q, k, &mut scratch);
            indices.extend(scratch.iter().map(|c| c.1));
        }
        Ok(NeighborIndex { indices, k })
    }

    /// Squared distance from each query to its nearest reference point, with that point's index.
    pub fn nearest(&self, queries: &[f64]) -> Vec<(f64, usize)> {
        let mut scratch = Vec::new();
        queries
            .chunks(3)
            .map(|q| {
                self.query(q, 1, &mut scratch);
                scratch[0]
            })
            .collect()
    }
}

/// Brute-force nearest neighbor (squared distance, index) for flat 3D rows.
pub fn nearest_brute(queries: &[f64], refs: &[f64]) -> Vec<(f64, usize)> {
    queries
        .chunks(3)
        .map(|q| {
            let mut best = (f64::INFINITY, 0);
            for (j, r) in refs.chunks(3).enumerate() {
                let d = sq_dist(q, r);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best
        })
        .collect()
}

/// Nearest neighbor of every query row, choosing the grid path for large inputs.
pub fn nearest(queries: &[f64], refs: &PointCloud) -> Vec<(f64, usize)> {
    if (queries.len() / 3) * refs.len() > 1 << 20 {
        GridIndex::new(refs).nearest(queries)
    } else {
        nearest_brute(queries, &refs.flat_f64())
    }
}

/// Greedy farthest point sampling starting at `start`.
///
/// Each step picks the point maximizing the distance to the already selected
/// set; ties go to the lowest index.
pub fn farthest_point_sample(pc: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if m == 0 || m > n {
        return Err(Error::NotEnoughPoints {
            op: "farthest_point_sample",
            needed: m.max(1),
            available: n,
        });
    }
    if start >= n {
        return Err(Error::InvalidArgument(format!(
            "fps start {start} out of range for {n} points"
        )));
    }
    let coords = pc.flat_f64();
    let mut min_d = vec![f64::INFINITY; n];
    let mut selected = Vec::with_capacity(m);
    let mut current = start;
    for _ in 0..m {
        selected.push(current);
        let c = &coords[current * 3..current * 3 + 3];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, md) in min_d.iter_mut().enumerate() {
            let d = sq_dist(&coords[i * 3..i * 3 + 3], c);
            if d < *md {
                *md = d;
            }
            if *md > best.0 {
                best = (*md, i);
            }
        }
        current = best.1;
    }
    Ok(selected)
}

/// `n` points drawn from a standard normal and projected onto the unit sphere.
pub fn sample_gaussian_sphere(n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sphere template needs at least one point".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let v: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(&mut rng));
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm < 1e-12 {
            continue;
        }
        points.push(v.map(|c| (c / norm) as f32));
    }
    PointCloud::new(points)
}

/// Keeps the `ceil(keep_fraction * count)` points with the smallest projection on
/// `direction`, preserving their original order. Equal projections keep the lower index.
pub fn halfspace_crop(
    pc: &PointCloud,
    direction: [f64; 3],
    keep_fraction: f64,
) -> Result<PointCloud> {
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::InvalidArgument(
            "crop direction must be finite and nonzero".into(),
        ));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep fraction {keep_fraction} outside (0, 1]"
        )));
    }
    let keep = ((keep_fraction * pc.len() as f64).ceil() as usize).clamp(1, pc.len());
    let mut order: Vec<(f64, usize)> = pc
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let dot = p[0] as f64 * direction[0]
                + p[1] as f64 * direction[1]
                + p[2] as f64 * direction[2];
            (dot, i)
        })
        .collect();
    order.sort_unstable_by(by_dist_then_index);
    let mut kept: Vec<usize> = order[..keep].iter().map(|o| o.1).collect();
    kept.sort_unstable();
    pc.select(&kept)
}

/// Similarity transform mapping a cloud to its normalized frame: `p_norm = (p - center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, pc: &PointCloud) -> Result<PointCloud> {
        PointCloud::new(
            pc.points()
                .iter()
                .map(|p| [0, 1, 2].map(|a| ((p[a] as f64 - self.center[a]) / self.scale) as f32))
                .collect(),
        )
    }

    pub fn invert(&self, pc: &PointCloud) -> Result<PointCloud> {
        PointCloud::new(
            pc.points()
                .iter()
                .map(|p| [0, 1, 2].map(|a| (p[a] as f64 * self.scale + self.center[a]) as f32))
                .collect(),
        )
    }
}

/// Centers a cloud on its centroid and scales its largest radius to 1.
/// A cloud with zero radius keeps scale 1.
pub fn normalize_cloud(pc: &PointCloud) -> Result<(PointCloud, Normalization)> {
    let n = pc.len() as f64;
    let mut center = [0.0f64; 3];
    for p in pc.points() {
        for a in 0..3 {
            center[a] += p[a] as f64;
        }
    }
    center = center.map(|c| c / n);
    let radius = pc
        .points()
        .iter()
        .map(|p| {
            (0..3)
                .map(|a| (p[a] as f64 - center[a]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0f64, f64::max);
    let scale = if radius > 0.0 { radius } else { 1.0 };
    let t = Normalization { center, scale };
    Ok((t.apply(pc)?, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud(pts: &[[f32; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [0; 3].map(|_| rng.random_range(-1.0f32..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn sphere_points_have_unit_norm_and_repeat() {
        let s = sample_gaussian_sphere(1000, 7).unwrap();
        for p in s.points() {
            let n = p.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
        }
        assert_eq!(s, sample_gaussian_sphere(1000, 7).unwrap());
        assert!(sample_gaussian_sphere(0, 1).is_err());
    }

    #[test]
    fn sphere_mean_is_near_origin() {
        let s = sample_gaussian_sphere(100_000, 3).unwrap();
        let mut m = [0.0f64; 3];
        for p in s.points() {
            for a in 0..3 {
                m[a] += p[a] as f64 / 1e5;
            }
        }
        assert!((m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt() < 0.02);
    }

    #[test]
    fn fps_square_corners() {
        let sq = cloud(&[[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [1., 1., 0.]]);
        assert_eq!(farthest_point_sample(&sq, 2, 0).unwrap(), vec![0, 3]);
        let mut all = farthest_point_sample(&sq, 4, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sample(&sq, 5, 0).is_err());
    }

    #[test]
    fn fps_ignores_appended_duplicates() {
        let pc = random_cloud(40, 11);
        let sel = farthest_point_sample(&pc, 12, 0).unwrap();
        let mut pts = pc.points().to_vec();
        pts.extend(sel.iter().map(|&i| pc.get(i)));
        let dup = PointCloud::new(pts).unwrap();
        assert_eq!(farthest_point_sample(&dup, 12, 0).unwrap(), sel);
    }

    #[test]
    fn knn_self_match_first_and_full_sort() {
        let pc = random_cloud(20, 5);
        let nn = knn(&pc, &pc, 20).unwrap();
        for i in 0..20 {
            assert_eq!(nn.row(i)[0], i);
            let mut r = nn.row(i).to_vec();
            r.sort();
            assert_eq!(r, (0..20).collect::<Vec<_>>());
        }
        assert!(knn(&pc, &pc, 21).is_err());
    }

    #[test]
    fn grid_matches_brute_force() {
        for seed in 0..20 {
            let refs = random_cloud(300 + seed as usize * 7, seed);
            let q = random_cloud(50, seed + 100);
            let k = 1 + (seed as usize % 9);
            let grid = GridIndex::new(&refs);
            assert_eq!(grid.knn(&q, k).unwrap(), knn(&q, &refs, k).unwrap());
            assert_eq!(grid.knn(&refs, k).unwrap(), knn(&refs, &refs, k).unwrap());
        }
    }

    #[test]
    fn grid_handles_queries_outside_bounds_and_flat_sets() {
        let refs =
            PointCloud::new((0..100).map(|i| [i as f32 * 0.01, 0.0, 0.0]).collect()).unwrap();
        let q = cloud(&[[5.0, 3.0, -2.0], [-1.0, 0.0, 0.0], [0.505, 0.0, 0.0]]);
        assert_eq!(
            GridIndex::new(&refs).knn(&q, 3).unwrap(),
            knn(&q, &refs, 3).unwrap()
        );
    }

    #[test]
    fn crop_keep_all_is_identity_and_keeps_lower_half() {
        let s = sample_gaussian_sphere(200, 2).unwrap();
        assert_eq!(halfspace_crop(&s, [0.0, 0.0, 1.0], 1.0).unwrap(), s);
        let half = halfspace_crop(&s, [0.0, 0.0, 1.0], 0.5).unwrap();
        assert_eq!(half.len(), 100);
        let mut zs: Vec<f32> = s.points().iter().map(|p| p[2]).collect();
        zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = (zs[99] + zs[100]) / 2.0;
        assert!(half.points().iter().all(|p| p[2] <= median));
        assert!(halfspace_crop(&s, [0.0; 3], 0.5).is_err());
        assert!(halfspace_crop(&s, [0.0, 0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let pc = random_cloud(64, 9);
        let (n, t) = normalize_cloud(&pc).unwrap();
        let max_r = n
            .points()
            .iter()
            .map(|p| p.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        assert!((max_r - 1.0).abs() < 1e-6);
        let back = t.invert(&n).unwrap();
        for (a, b) in back.points().iter().zip(pc.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-5);
            }
        }
        let (_, t2) = normalize_cloud(&n).unwrap();
        assert!(t2.center.iter().all(|c| c.abs() < 1e-6) && (t2.scale - 1.0).abs() < 1e-6);
        let single = cloud(&[[2.0, 3.0, 4.0]]);
        let (s, ts) = normalize_cloud(&single).unwrap();
        assert_eq!(ts.scale, 1.0);
        assert_eq!(s.get(0), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud(_))));
        assert!(matches!(
            PointCloud::new(vec![[0.0; 3], [f32::NAN, 0.0, 0.0]]),
            Err(Error::NonFinitePoint(1))
        ));
    }
}
