//! Synthetic primitive datasets, manifests and named random substreams.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::geometry::{halfspace_crop, normalize_cloud, PointCloud};
use crate::io::{read_cloud_auto, write_cloud, CloudFormat};
use crate::{Error, Result};

/// Seed of the substream `name` of a run seeded with `seed`.
pub fn substream(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed for item `index` of substream `name`, e.g. one training step.
pub fn substream_at(seed: u64, name: &str, index: u64) -> u64 {
    substream(substream(seed, name), &index.to_string())
}

/// Crop difficulty; the kept fraction of the complete cloud.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Median,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Median, Difficulty::Hard];

    pub fn keep_fraction(self) -> f64 {
        match self {
            Difficulty::Easy => 0.75,
            Difficulty::Median => 0.5,
            Difficulty::Hard => 0.25,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "easy" => Some(Difficulty::Easy),
            "median" => Some(Difficulty::Median),
            "hard" => Some(Difficulty::Hard),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Sphere { radius: f64 },
    Box { extents: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Cone { radius: f64, height: f64 },
    Torus { major: f64, minor: f64 },
}

impl Primitive {
    pub const NAMES: [&'static str; 5] = ["sphere", "box", "cylinder", "cone", "torus"];

    /// Default proportions for a named shape.
    pub fn named(name: &str) -> Result<Self> {
        Ok(match name {
            "sphere" => Primitive::Sphere { radius: 1.0 },
            "box" => Primitive::Box {
                extents: [1.0, 0.6, 0.4],
            },
            "cylinder" => Primitive::Cylinder {
                radius: 0.4,
                height: 1.2,
            },
            "cone" => Primitive::Cone {
                radius: 0.6,
                height: 1.2,
            },
            "torus" => Primitive::Torus {
                major: 0.7,
                minor: 0.25,
            },
            other => return Err(Error::InvalidArgument(format!("unknown shape `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Sphere { .. } => "sphere",
            Primitive::Box { .. } => "box",
            Primitive::Cylinder { .. } => "cylinder",
            Primitive::Cone { .. } => "cone",
            Primitive::Torus { .. } => "torus",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        let valid = match *self {
            Primitive::Sphere { radius } => ok(radius),
            Primitive::Box { extents } => extents.iter().all(|&e| ok(e)),
            Primitive::Cylinder { radius, height } | Primitive::Cone { radius, height } => {
                ok(radius) && ok(height)
            }
            Primitive::Torus { major, minor } => ok(major) && ok(minor) && minor < major,
        };
        if valid {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid primitive parameters {self:?}"
            )))
        }
    }

    /// `n` points uniformly distributed over the surface area.
    pub fn sample_surface(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidArgument(
                "sample count must be positive".into(),
            ));
        }
        let points = (0..n)
            .map(|_| self.sample_point(rng).map(|c| c as f32))
            .collect();
        PointCloud::new(points)
    }

    fn sample_point(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let disc = |rng: &mut ChaCha8Rng, r: f64| {
            let rho = r * rng.random::<f64>().sqrt();
            let phi = 2.0 * PI * rng.random::<f64>();
            (rho * phi.cos(), rho * phi.sin())
        };
        match *self {
            Primitive::Sphere { radius } => loop {
                let v: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(rng));
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm > 1e-12 {
                    break v.map(|c| radius * c / norm);
                }
            },
            Primitive::Box { extents: [a, b, c] } => {
                let areas = [b * c, a * c, a * b];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut axis = 2;
                for (i, &ar) in areas.iter().enumerate() {
                    if pick < ar {
                        axis = i;
                        break;
                    }
                    pick -= ar;
                }
                let half = [a / 2.0, b / 2.0, c / 2.0];
                let mut p = half.map(|h| (rng.random::<f64>() * 2.0 - 1.0) * h);
                p[axis] = if rng.random::<bool>() {
                    half[axis]
                } else {
                    -half[axis]
                };
                p
            }
            Primitive::Cylinder { radius, height } => {
                let side = 2.0 * PI * radius * height;
                let cap = PI * radius * radius;
                let pick = rng.random::<f64>() * (side + 2.0 * cap);
                if pick < side {
                    let phi = 2.0 * PI * rng.random::<f64>();
                    let z = (rng.random::<f64>() - 0.5) * height;
                    [radius * phi.cos(), radius * phi.sin(), z]
                } else {
                    let (x, y) = disc(rng, radius);
                    let z = if pick < side + cap {
                        height / 2.0
                    } else {
                        -height / 2.0
                    };
                    [x, y, z]
                }
            }
            Primitive::Cone { radius, height } => {
                let slant = (radius * radius + height * height).sqrt();
                let side = PI * radius * slant;
                let base = PI * radius * radius;
                if rng.random::<f64>() * (side + base) < side {
                    // Area grows linearly with distance from the apex.
                    let t = rng.random::<f64>().sqrt();
                    let phi = 2.0 * PI * rng.random::<f64>();
                    [
                        t * radius * phi.cos(),
                        t * radius * phi.sin(),
                        height / 2.0 - t * height,
                    ]
                } else {
                    let (x, y) = disc(rng, radius);
                    [x, y, -height / 2.0]
                }
            }
            Primitive::Torus { major, minor } => loop {
                let theta = 2.0 * PI * rng.random::<f64>();
                let w = (major + minor * theta.cos()) / (major + minor);
                if rng.random::<f64>() < w {
                    let phi = 2.0 * PI * rng.random::<f64>();
                    let ring = major + minor * theta.cos();
                    break [ring * phi.cos(), ring * phi.sin(), minor * theta.sin()];
                }
            },
        }
    }
}

/// A partial observation with its complete counterpart, in one normalized frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub category: String,
    pub partial: PointCloud,
    pub complete: PointCloud,
}

/// Resamples to exactly `n` points: a random subset, or every point plus random repeats.
pub fn resample(pc: &PointCloud, n: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let len = pc.len();
    let idx: Vec<usize> = if len >= n {
        rand::seq::index::sample(rng, len, n).into_vec()
    } else {
        (0..len)
            .chain((len..n).map(|_| rng.random_range(0..len)))
            .collect()
    };
    pc.select(&idx)
}

fn random_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(rng));
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-12 {
            return v.map(|c| c / norm);
        }
    }
}

/// Partial view of a normalized complete cloud: a seeded half-space crop resampled to `n_partial`.
pub fn crop_partial(
    complete: &PointCloud,
    keep_fraction: f64,
    n_partial: usize,
    seed: u64,
) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = random_direction(&mut rng);
    let cropped = halfspace_crop(complete, direction, keep_fraction)?;
    resample(&cropped, n_partial, &mut rng)
}

/// One synthetic pair. `difficulty` fixes the crop; `None` draws it from the seed.
pub fn gen_synthetic_pair(
    shape: Primitive,
    n_partial: usize,
    n_complete: usize,
    difficulty: Option<Difficulty>,
    seed: u64,
) -> Result<SamplePair> {
    if n_partial == 0 {
        return Err(Error::InvalidArgument(
            "partial count must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = shape.sample_surface(n_complete, &mut rng)?;
    let (complete, _) = normalize_cloud(&raw)?;
    let difficulty = difficulty.unwrap_or_else(|| Difficulty::ALL[rng.random_range(0..3)]);
    let partial = crop_partial(
        &complete,
        difficulty.keep_fraction(),
        n_partial,
        rng.random(),
    )?;
    Ok(SamplePair {
        id: format!("{}-{seed:016x}", shape.name()),
        category: shape.name().to_string(),
        partial,
        complete,
    })
}

/// The overfit set: `crops` differently cropped views of each shape.
pub fn overfit_set(
    shapes: &[&str],
    crops: usize,
    n_partial: usize,
    n_complete: usize,
    seed: u64,
) -> Result<Vec<SamplePair>> {
    let mut out = Vec::new();
    for (s, name) in shapes.iter().enumerate() {
        let shape = Primitive::named(name)?;
        let mut rng = ChaCha8Rng::seed_from_u64(substream_at(seed, "data", s as u64));
        let raw = shape.sample_surface(n_complete, &mut rng)?;
        let (complete, _) = normalize_cloud(&raw)?;
        for c in 0..crops {
            let difficulty = Difficulty::ALL[c % 3];
            let partial = crop_partial(
                &complete,
                difficulty.keep_fraction(),
                n_partial,
                rng.random(),
            )?;
            out.push(SamplePair {
                id: format!("{name}-{c}"),
                category: name.to_string(),
                partial,
                complete: complete.clone(),
            });
        }
    }
    Ok(out)
}

/// One manifest line: paths are resolved relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub category: String,
    pub partial: PathBuf,
    pub complete: PathBuf,
}

impl ManifestEntry {
    pub fn load(&self) -> Result<SamplePair> {
        Ok(SamplePair {
            id: self.id.clone(),
            category: self.category.clone(),
            partial: read_cloud_auto(&self.partial)?,
            complete: read_cloud_auto(&self.complete)?,
        })
    }
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Parses a tab-separated `id category partial complete` manifest.
/// Blank lines and lines starting with `#` are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let err = |reason: String| Error::Manifest {
        path: path.display().to_string(),
        reason,
    };
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!(
                "line {}: expected 4 tab-separated fields, found {}",
                no + 1,
                fields.len()
            )));
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(err(format!(
                "line {}: duplicate id `{}`",
                no + 1,
                fields[0]
            )));
        }
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            category: fields[1].to_string(),
            partial: base.join(fields[2]),
            complete: base.join(fields[3]),
        });
    }
    Ok(entries)
}

/// Loads every pair listed in `dir/manifest.tsv`.
pub fn load_dataset(dir: &Path) -> Result<Vec<SamplePair>> {
    load_manifest(&dir.join(MANIFEST_NAME))?
        .iter()
        .map(ManifestEntry::load)
        .collect()
}

/// Writes pairs as PLY files under `dir/partial` and `dir/complete` plus the manifest.
pub fn write_dataset(dir: &Path, pairs: &[SamplePair]) -> Result<()> {
    std::fs::create_dir_all(dir.join("partial"))?;
    std::fs::create_dir_all(dir.join("complete"))?;
    let mut manifest = String::from("# id\tcategory\tpartial\tcomplete\n");
    for pair in pairs {
        let partial = format!("partial/{}.ply", pair.id);
        let complete = format!("complete/{}.ply", pair.id);
        write_cloud(&pair.partial, &dir.join(&partial), CloudFormat::PlyBinaryLe)?;
        write_cloud(
            &pair.complete,
            &dir.join(&complete),
            CloudFormat::PlyBinaryLe,
        )?;
        manifest.push_str(&format!(
            "{}\t{}\t{partial}\t{complete}\n",
            pair.id, pair.category
        ));
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

/// `count` pairs per shape, each with its own seed drawn from the `data` substream.
pub fn gen_dataset(
    shapes: &[&str],
    count: usize,
    n_partial: usize,
    n_complete: usize,
    seed: u64,
) -> Result<Vec<SamplePair>> {
    let mut pairs = Vec::with_capacity(shapes.len() * count);
    for (s, name) in shapes.iter().enumerate() {
        let shape = Primitive::named(name)?;
        for i in 0..count {
            let item_seed = substream_at(seed, "data", (s * count + i) as u64);
            let mut pair = gen_synthetic_pair(shape, n_partial, n_complete, None, item_seed)?;
            pair.id = format!("{name}-{i:04}");
            pairs.push(pair);
        }
    }
    Ok(pairs)
}
