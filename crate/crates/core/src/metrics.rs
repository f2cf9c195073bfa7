//! Chamfer distance, F-Score and the differentiable training loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use pcc_autograd::{Real, Var};

use crate::geometry::{self, PointCloud};
use crate::{Error, Result};

/// Per-point distance convention.
///
/// `L1` averages Euclidean distances (the unsquared form); `L2` averages squared
/// Euclidean distances, which is the magnitude benchmark tables report as CD-l2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdNorm {
    L1,
    L2,
}

fn directional(sq: &[(f64, usize)], norm: CdNorm) -> f64 {
    let sum: f64 = sq
        .iter()
        .map(|&(d, _)| match norm {
            CdNorm::L1 => d.sqrt(),
            CdNorm::L2 => d,
        })
        .sum();
    sum / sq.len() as f64
}

/// Symmetric Chamfer distance: both directional nearest-neighbor means, summed.
pub fn chamfer(p: &PointCloud, g: &PointCloud, norm: CdNorm) -> Result<f64> {
    let (pf, gf) = (p.flat_f64(), g.flat_f64());
    let pg = geometry::nearest(&pf, g);
    let gp = geometry::nearest(&gf, p);
    Ok(directional(&pg, norm) + directional(&gp, norm))
}

/// F-Score at threshold `tau`; a point counts when its nearest neighbor in the other cloud is closer than `tau`.
pub fn fscore(p: &PointCloud, g: &PointCloud, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "fscore threshold must be positive, got {tau}"
        )));
    }
    let (pf, gf) = (p.flat_f64(), g.flat_f64());
    let frac = |sq: Vec<(f64, usize)>| {
        let n = sq.len() as f64;
        sq.iter().filter(|(d, _)| d.sqrt() < tau).count() as f64 / n
    };
    let precision = frac(geometry::nearest(&pf, g));
    let recall = frac(geometry::nearest(&gf, p));
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Differentiable Chamfer distance with unsquared Euclidean point distances.
///
/// Nearest-neighbor assignments are computed on the current values and held
/// fixed; gradients flow through the matched coordinate differences of `pred`.
pub fn chamfer_l1_var<'t, T: Real>(pred: Var<'t, T>, gt: &PointCloud) -> Result<Var<'t, T>> {
    let shape = pred.shape();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::InvalidArgument(format!(
            "chamfer expects [N, 3], got {shape:?}"
        )));
    }
    let tape = pred.tape();
    let pv = pred.value();
    let pred_flat: Vec<f64> = pv.data().iter().map(|v| v.as_f64()).collect();
    let gt_tensor = tape.constant(gt.to_tensor::<T>());

    let pg: Vec<usize> = nearest_exact(&pred_flat, &gt.flat_f64());
    let gp: Vec<usize> = nearest_exact(&gt.flat_f64(), &pred_flat);

    let matched_g = gt_tensor.gather(&pg, 0)?;
    let forward = pred.sub(matched_g)?.row_norm()?.mean();
    let matched_p = pred.gather(&gp, 0)?;
    let backward = gt_tensor.sub(matched_p)?.row_norm()?.mean();
    Ok(forward.add(backward)?)
}

fn nearest_exact(queries: &[f64], refs: &[f64]) -> Vec<usize> {
    if (queries.len() / 3) * (refs.len() / 3) > 1 << 20 {
        let pts: Vec<[f32; 3]> = refs
            .chunks(3)
            .map(|c| [c[0] as f32, c[1] as f32, c[2] as f32])
            .collect();
        // Reference sets large enough for the grid path are f32 ground truth or
        // f32-representable predictions; fall back to brute force otherwise.
        if refs.iter().all(|&v| (v as f32) as f64 == v) {
            let cloud = PointCloud::new(pts).expect("finite refs");
            return geometry::GridIndex::new(&cloud)
                .nearest(queries)
                .into_iter()
                .map(|c| c.1)
                .collect();
        }
    }
    geometry::nearest_brute(queries, refs)
        .into_iter()
        .map(|c| c.1)
        .collect()
}

/// Training objective terms: fine-template Chamfer, dense-prediction Chamfer and their sum.
pub struct LossTerms<'t, T: Real> {
    pub total: Var<'t, T>,
    pub template: Var<'t, T>,
    pub dense: Var<'t, T>,
}

/// Sum of the unsquared Chamfer distances of the fine template and of the dense prediction to `gt`.
pub fn training_loss<'t, T: Real>(
    fine_template: Var<'t, T>,
    prediction: Var<'t, T>,
    gt: &PointCloud,
) -> Result<LossTerms<'t, T>> {
    let template = chamfer_l1_var(fine_template, gt)?;
    let dense = chamfer_l1_var(prediction, gt)?;
    Ok(LossTerms {
        total: template.add(dense)?,
        template,
        dense,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CategoryMetrics {
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub fscore: f64,
    pub count: usize,
}

/// Evaluation summary. The headline values are the mean over categories.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub fscore: f64,
    pub per_category: BTreeMap<String, CategoryMetrics>,
}

/// Metrics of one prediction against its ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub fscore: f64,
}

pub const FSCORE_THRESHOLD: f64 = 0.01;

pub fn sample_metrics(pred: &PointCloud, gt: &PointCloud) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        cd_l1: chamfer(pred, gt, CdNorm::L1)?,
        cd_l2: chamfer(pred, gt, CdNorm::L2)?,
        fscore: fscore(pred, gt, FSCORE_THRESHOLD)?,
    })
}

impl MetricsReport {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = (&'a str, SampleMetrics)>) -> Self {
        let mut per_category: BTreeMap<String, CategoryMetrics> = BTreeMap::new();
        for (cat, m) in samples {
            let e = per_category.entry(cat.to_string()).or_default();
            e.cd_l1 += m.cd_l1;
            e.cd_l2 += m.cd_l2;
            e.fscore += m.fscore;
            e.count += 1;
        }
        for e in per_category.values_mut() {
            let n = e.count as f64;
            e.cd_l1 /= n;
            e.cd_l2 /= n;
            e.fscore /= n;
        }
        let k = per_category.len().max(1) as f64;
        Self {
            cd_l1: per_category.values().map(|e| e.cd_l1).sum::<f64>() / k,
            cd_l2: per_category.values().map(|e| e.cd_l2).sum::<f64>() / k,
            fscore: per_category.values().map(|e| e.fscore).sum::<f64>() / k,
            per_category,
        }
    }

    /// Plain-text table: one row per category plus `Avg`; Chamfer values shown x1000.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>12} {:>12} {:>10}",
            "category", "n", "CD-l1x1000", "CD-l2x1000", "F-Score@1%"
        );
        for (cat, m) in &self.per_category {
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>12.3} {:>12.3} {:>10.4}",
                cat,
                m.count,
                m.cd_l1 * 1000.0,
                m.cd_l2 * 1000.0,
                m.fscore
            );
        }
        let n: usize = self.per_category.values().map(|m| m.count).sum();
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>12.3} {:>12.3} {:>10.4}",
            "Avg",
            n,
            self.cd_l1 * 1000.0,
            self.cd_l2 * 1000.0,
            self.fscore
        );
        out
    }

    /// Line-delimited JSON records with raw (unscaled) values, categories first, then `Avg`.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        let mut row = |cat: &str, n: usize, l1: f64, l2: f64, f: f64| {
            let rec = serde_json::json!({"category": cat, "count": n, "cd_l1": l1, "cd_l2": l2, "fscore": f});
            out.push_str(&rec.to_string());
            out.push('\n');
        };
        for (cat, m) in &self.per_category {
            row(cat, m.count, m.cd_l1, m.cd_l2, m.fscore);
        }
        let n = self.per_category.values().map(|m| m.count).sum();
        row("Avg", n, self.cd_l1, self.cd_l2, self.fscore);
        out
    }
}

pub fn cloud_from_var<T: Real>(v: Var<'_, T>) -> Result<PointCloud> {
    PointCloud::from_tensor(&v.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcc_autograd::Tape;

    fn cloud(pts: &[[f32; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn identical_clouds() {
        let p = cloud(&[[0., 0., 0.], [1., 2., 3.], [-1., 0.5, 0.25]]);
        assert_eq!(chamfer(&p, &p, CdNorm::L1).unwrap(), 0.0);
        assert_eq!(chamfer(&p, &p, CdNorm::L2).unwrap(), 0.0);
        assert_eq!(fscore(&p, &p, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn single_point_pair() {
        let p = cloud(&[[0., 0., 0.]]);
        let g = cloud(&[[1., 0., 0.]]);
        assert_eq!(chamfer(&p, &g, CdNorm::L1).unwrap(), 2.0);
        assert_eq!(chamfer(&p, &g, CdNorm::L2).unwrap(), 2.0);
        assert_eq!(fscore(&p, &g, 0.5).unwrap(), 0.0);
        assert!(fscore(&p, &g, 0.0).is_err());
    }

    #[test]
    fn zero_loss_when_everything_matches() {
        let g = cloud(&[[0., 0., 0.], [1., 0., 0.], [0., 1., 0.]]);
        let tape = Tape::<f64>::new();
        let fine = tape.leaf(g.to_tensor());
        let pred = tape.leaf(g.to_tensor());
        let terms = training_loss(fine, pred, &g).unwrap();
        assert_eq!(terms.total.item(), 0.0);
        let grads = tape.backward(terms.total).unwrap();
        assert!(grads.get(pred).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn report_table_has_avg_row() {
        let m = SampleMetrics {
            cd_l1: 0.01,
            cd_l2: 0.002,
            fscore: 0.5,
        };
        let r = MetricsReport::from_samples([("sphere", m), ("box", m)]);
        let table = r.to_table();
        assert!(table.contains("sphere") && table.contains("box") && table.contains("Avg"));
        assert!(table.contains("10.000"));
        assert_eq!(r.to_records().lines().count(), 3);
    }
}
