//! Correspondence scoring, pool replacement, voting and dynamic query generation.

use pcc_autograd::{BoundParams, ParamId, Real, Tensor, Var};

use super::nn::{broadcast_rows, straight_through_gate, Builder, Linear, Mlp};
use super::ModelConfig;
use crate::geometry::{farthest_point_sample, knn, PointCloud};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Template,
    Input,
}

/// Graph attention from each template point to its `k` nearest sampled-input points.
#[derive(Clone, Debug)]
pub struct CorresAttention {
    embed: Mlp,
    aggregate: Linear,
    query: Linear,
    key: Linear,
    value: Linear,
    head: Mlp,
}

impl CorresAttention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.corres_width;
        let act = cfg.kernel_activation;
        Ok(Self {
            embed: Mlp::new(b, "corres.embed", &[3, w, w], act)?,
            aggregate: Linear::new(b, "corres.aggregate", w + 3, w)?,
            query: Linear::new(b, "corres.q", w, w)?,
            key: Linear::new(b, "corres.k", w, w)?,
            value: Linear::new(b, "corres.v", w, w)?,
            head: Mlp::new(b, "corres.score", &[w, w, 1], act)?,
        })
    }

    /// Scores `[N0]`; higher means more similar to the sampled input.
    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        coarse: Var<'t, T>,
        sampled: &PointCloud,
        cfg: &ModelConfig,
    ) -> Result<Var<'t, T>> {
        let k = cfg.knn_k;
        if sampled.len() < k {
            return Err(Error::NotEnoughPoints {
                op: "corres_attention",
                needed: k,
                available: sampled.len(),
            });
        }
        let n = coarse.shape()[0];
        let w = cfg.corres_width;
        let tape = coarse.tape();
        let template_cloud = PointCloud::from_tensor(&coarse.value())?;
        let nbrs = knn(&template_cloud, sampled, k)?;
        let input = tape.constant(sampled.to_tensor::<T>());

        let t_emb = self.embed.forward(p, coarse)?;
        let s_emb = self.embed.forward(p, input)?;
        let rel = input
            .gather(nbrs.as_flat(), 0)?
            .sub(coarse.gather(&nbrs.query_repeated(), 0)?)?;
        let edge = Var::concat(&[s_emb.gather(nbrs.as_flat(), 0)?, rel], 1)?;
        let agg = cfg
            .kernel_activation
            .apply(self.aggregate.forward(p, edge)?);
        let keys = self.key.forward(p, agg)?.reshape(&[n, k, w])?;
        let vals = self.value.forward(p, agg)?.reshape(&[n, k, w])?;
        let q = self.query.forward(p, t_emb)?.reshape(&[n, 1, w])?;
        let scale = T::from_f64_lossy(1.0 / (w as f64).sqrt());
        let attn = q
            .matmul(keys.permute(&[0, 2, 1])?)?
            .scale(scale)
            .softmax(2)?;
        let out = attn.matmul(vals)?.reshape(&[n, w])?.add(t_emb)?;
        Ok(self.head.forward(p, out)?.reshape(&[n])?)
    }
}

/// `N1` candidate points: the kept template points followed by the sampled input points.
pub struct CorresPool<'t, T: Real> {
    pub points: Var<'t, T>,
    pub provenance: Vec<Provenance>,
    /// Correspondence score of each kept template point, zero for input points.
    pub scores: Var<'t, T>,
    /// Coarse-template index of each kept template point, ascending.
    pub template_indices: Vec<usize>,
    /// Partial-input index of each input point, in FPS order.
    pub input_indices: Vec<usize>,
}

/// Indices of `scores` sorted by descending value, ties by lowest index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn rank_ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Template indices kept after dropping `N0 - N3` by score, ascending.
pub fn kept_template_indices(scores: &[f64], keep: usize, drop_highest: bool) -> Vec<usize> {
    let order = if drop_highest {
        rank_descending(scores)
    } else {
        rank_ascending(scores)
    };
    let mut kept = order[scores.len() - keep..].to_vec();
    kept.sort_unstable();
    kept
}

/// Replaces the dropped template points with FPS samples of the raw partial input.
///
/// Kept template rows are gated by their scores so the correspondence branch
/// receives gradient; input rows are copied verbatim.
pub fn build_pool<'t, T: Real>(
    coarse: Var<'t, T>,
    scores: Var<'t, T>,
    partial: &PointCloud,
    cfg: &ModelConfig,
) -> Result<CorresPool<'t, T>> {
    if partial.len() < cfg.pool_input {
        return Err(Error::NotEnoughPoints {
            op: "build_pool",
            needed: cfg.pool_input,
            available: partial.len(),
        });
    }
    let tape = coarse.tape();
    let sv: Vec<f64> = scores.value().data().iter().map(|v| v.as_f64()).collect();
    let template_indices = kept_template_indices(&sv, cfg.pool_template, cfg.drop_highest);
    let input_indices = farthest_point_sample(
        partial,
        cfg.pool_input,
        cfg.fps_start.min(partial.len() - 1),
    )?;
    let input = tape.constant(partial.select(&input_indices)?.to_tensor::<T>());
    let zeros = tape.constant(Tensor::zeros(&[cfg.pool_input])?);
    let (points, pool_scores) = if template_indices.is_empty() {
        (input, zeros)
    } else {
        let kept_scores = scores.gather(&template_indices, 0)?;
        let kept = straight_through_gate(coarse.gather(&template_indices, 0)?, kept_scores)?;
        (
            Var::concat(&[kept, input], 0)?,
            Var::concat(&[kept_scores, zeros], 0)?,
        )
    };
    let mut provenance = vec![Provenance::Template; template_indices.len()];
    provenance.resize(cfg.pool_size(), Provenance::Input);
    Ok(CorresPool {
        points,
        provenance,
        scores: pool_scores,
        template_indices,
        input_indices,
    })
}

/// Pointwise voting network over coordinates, a provenance embedding and a max-pooled context.
#[derive(Clone, Debug)]
pub struct Voter {
    provenance: ParamId,
    point: Mlp,
    score: Mlp,
}

impl Voter {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let v = cfg.vote_width;
        let act = cfg.kernel_activation;
        Ok(Self {
            provenance: b.uniform("vote.provenance", &[2, v], 1.0)?,
            point: Mlp::new(b, "vote.point", &[3 + v, v, v], act)?,
            score: Mlp::new(b, "vote.score", &[2 * v, v, 1], act)?,
        })
    }

    /// Vote scores `[N1]`.
    pub fn scores<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        pool: &CorresPool<'t, T>,
    ) -> Result<Var<'t, T>> {
        let n = pool.provenance.len();
        let flags: Vec<usize> = pool
            .provenance
            .iter()
            .map(|s| match s {
                Provenance::Template => 0,
                Provenance::Input => 1,
            })
            .collect();
        let emb = p.var(self.provenance).gather(&flags, 0)?;
        let h = self
            .point
            .forward(p, Var::concat(&[pool.points, emb], 1)?)?;
        let context = broadcast_rows(h.reduce_max(0)?, n)?;
        Ok(self
            .score
            .forward(p, Var::concat(&[h, context], 1)?)?
            .reshape(&[n])?)
    }

    /// Fine template `[N0, 3]`: the top-`N0` pool points by vote, in pool order.
    pub fn select<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        pool: &CorresPool<'t, T>,
        cfg: &ModelConfig,
    ) -> Result<(Var<'t, T>, Vec<Provenance>)> {
        let n0 = cfg.template_points;
        let n1 = pool.provenance.len();
        if n0 > n1 {
            return Err(Error::NotEnoughPoints {
                op: "vote_select",
                needed: n0,
                available: n1,
            });
        }
        let votes = self.scores(p, pool)?;
        let vv: Vec<f64> = votes.value().data().iter().map(|v| v.as_f64()).collect();
        let selected = top_k(&vv, n0);
        let fine = straight_through_gate(
            pool.points.gather(&selected, 0)?,
            votes.gather(&selected, 0)?,
        )?;
        let provenance = selected.iter().map(|&i| pool.provenance[i]).collect();
        Ok((fine, provenance))
    }
}

/// Indices of the `k` largest scores (ties by lowest index), returned ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut sel = rank_descending(scores)[..k].to_vec();
    sel.sort_unstable();
    sel
}

/// Decoder queries: fine-template coordinates with the broadcast global feature.
pub struct QueryTokens<'t, T: Real> {
    pub features: Var<'t, T>,
    pub anchors: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct QueryGenerator {
    project: Linear,
}

impl QueryGenerator {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            project: Linear::new(b, "queries.project", 3 + cfg.width, cfg.width)?,
        })
    }

    /// Concatenation `[N0, 3 + C]` before projection.
    pub fn raw<'t, T: Real>(fine: Var<'t, T>, global: Var<'t, T>) -> Result<Var<'t, T>> {
        let n = fine.shape()[0];
        Ok(Var::concat(&[fine, broadcast_rows(global, n)?], 1)?)
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        fine: Var<'t, T>,
        global: Var<'t, T>,
    ) -> Result<QueryTokens<'t, T>> {
        Ok(QueryTokens {
            features: self.project.forward(p, Self::raw(fine, global)?)?,
            anchors: fine,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_drop_lowest_indices() {
        let kept = kept_template_indices(&[0.5; 8], 3, true);
        assert_eq!(kept, vec![5, 6, 7]);
        let kept = kept_template_indices(&[0.5; 8], 3, false);
        assert_eq!(kept, vec![5, 6, 7]);
    }

    #[test]
    fn drop_direction() {
        let s = [0.9, 0.1, 0.5, 0.7];
        assert_eq!(kept_template_indices(&s, 2, true), vec![1, 2]);
        assert_eq!(kept_template_indices(&s, 2, false), vec![0, 3]);
    }

    #[test]
    fn top_k_ties_prefer_low_index() {
        assert_eq!(top_k(&[1.0, 2.0, 2.0, 0.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k(&[3.0, 1.0], 2), vec![0, 1]);
    }
}
