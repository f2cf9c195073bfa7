//! Point-proxy tokenizer, template-fused geometry-aware encoder and coarse template head.

use pcc_autograd::{BoundParams, Real, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nn::{broadcast_rows, Builder, EdgeConv, LayerNorm, Linear, Mlp, MultiHeadAttention};
use super::ModelConfig;
use crate::geometry::{farthest_point_sample, knn, knn_features, PointCloud};
use crate::{Error, Result};

/// `M` proxy tokens: feature row `i` describes the neighborhood of anchor `i`.
pub struct TokenSet<'t, T: Real> {
    pub features: Var<'t, T>,
    pub anchors: PointCloud,
}

impl<T: Real> Clone for TokenSet<'_, T> {
    fn clone(&self) -> Self {
        Self {
            features: self.features,
            anchors: self.anchors.clone(),
        }
    }
}

/// FPS anchors, a two-layer edge-convolution stack and the feature/position embeddings.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    edge1: EdgeConv,
    edge2: EdgeConv,
    feature_embed: Mlp,
    position_embed: Mlp,
}

impl Tokenizer {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.width;
        Ok(Self {
            edge1: EdgeConv::new(
                b,
                "tokenizer.edge1",
                3,
                cfg.edge_width,
                cfg.kernel_activation,
            )?,
            edge2: EdgeConv::new(
                b,
                "tokenizer.edge2",
                cfg.edge_width,
                c,
                cfg.kernel_activation,
            )?,
            feature_embed: Mlp::new(
                b,
                "tokenizer.feature_embed",
                &[c, c, c],
                cfg.kernel_activation,
            )?,
            position_embed: Mlp::new(
                b,
                "tokenizer.position_embed",
                &[3, c, c],
                cfg.kernel_activation,
            )?,
        })
    }

    /// Tokens for `pc`. Clouds smaller than `M` are padded by random repetition
    /// (seeded by `upsample_seed`) before sampling.
    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        pc: &PointCloud,
        cfg: &ModelConfig,
        upsample_seed: u64,
    ) -> Result<TokenSet<'t, T>> {
        let m = cfg.tokens;
        let padded;
        let source = if pc.len() < m {
            let mut rng = ChaCha8Rng::seed_from_u64(upsample_seed);
            let mut idx: Vec<usize> = (0..pc.len()).collect();
            idx.extend((pc.len()..m).map(|_| rng.random_range(0..pc.len())));
            padded = pc.select(&idx)?;
            &padded
        } else {
            pc
        };
        let anchor_idx = farthest_point_sample(source, m, cfg.fps_start.min(source.len() - 1))?;
        let anchors = source.select(&anchor_idx)?;
        let tape = p.var(self.edge1.center.weight).tape();
        let coords = tape.constant(anchors.to_tensor::<T>());
        let nbrs = knn(&anchors, &anchors, cfg.knn_k.min(m))?;
        let local = self.edge1.forward(p, coords, &nbrs)?;
        let local = self.edge2.forward(p, local, &nbrs)?;
        let features = self
            .feature_embed
            .forward(p, local)?
            .add(self.position_embed.forward(p, coords)?)?;
        Ok(TokenSet { features, anchors })
    }
}

/// Self-attention over all tokens concatenated with a kNN edge branch in feature
/// space, projected back to the token width and added residually (pre-norm).
#[derive(Clone, Debug)]
pub struct GeometryAwareAttention {
    norm: LayerNorm,
    attention: MultiHeadAttention,
    local: EdgeConv,
    merge: Linear,
}

impl GeometryAwareAttention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.width;
        Ok(Self {
            norm: LayerNorm::new(b, &format!("{name}.norm"), c)?,
            attention: MultiHeadAttention::new(b, &format!("{name}.attn"), c, cfg.heads)?,
            local: EdgeConv::new(b, &format!("{name}.local"), c, c, cfg.kernel_activation)?,
            merge: Linear::new(b, &format!("{name}.merge"), 2 * c, c)?,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        x: Var<'t, T>,
        k: usize,
    ) -> Result<Var<'t, T>> {
        let h = self.norm.forward(p, x)?;
        let hv = h.value();
        let nbrs = knn_features(&hv, &hv, k.min(hv.shape()[0]))?;
        let local = self.local.forward(p, h, &nbrs)?;
        let global = self.attention.forward(p, h, h)?;
        let merged = self.merge.forward(p, Var::concat(&[local, global], 1)?)?;
        Ok(x.add(merged)?)
    }
}

/// Pre-norm feed-forward sublayer with a residual connection.
#[derive(Clone, Debug)]
pub struct FeedForward {
    norm: LayerNorm,
    mlp: Mlp,
}

impl FeedForward {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.width;
        Ok(Self {
            norm: LayerNorm::new(b, &format!("{name}.norm"), c)?,
            mlp: Mlp::new(
                b,
                &format!("{name}.mlp"),
                &[c, cfg.ffn_mult * c, c],
                cfg.ffn_activation,
            )?,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let h = self.norm.forward(p, x)?;
        Ok(x.add(self.mlp.forward(p, h)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attention: GeometryAwareAttention,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        x: Var<'t, T>,
        k: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.attention.forward(p, x, k)?;
        self.ffn.forward(p, x)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

impl Encoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let blocks = (0..cfg.enc_depth)
            .map(|i| {
                Ok(EncoderBlock {
                    attention: GeometryAwareAttention::new(b, &format!("encoder.{i}.geo"), cfg)?,
                    ffn: FeedForward::new(b, &format!("encoder.{i}.ffn"), cfg)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(b, "encoder.norm", cfg.width)?,
        })
    }

    /// Runs the encoder, adding the template token features to the running
    /// input features before each block (or only the first when
    /// `template_every_layer` is off).
    pub fn encode_with_template<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        input: &TokenSet<'t, T>,
        template: Option<&TokenSet<'t, T>>,
        cfg: &ModelConfig,
    ) -> Result<TokenSet<'t, T>> {
        if let Some(t) = template {
            let (a, b) = (input.features.shape(), t.features.shape());
            if a != b {
                return Err(Error::Tensor(pcc_autograd::TensorError::ShapeMismatch {
                    op: "encode_with_template",
                    lhs: a,
                    rhs: b,
                }));
            }
        }
        let mut x = input.features;
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(t) = template {
                if cfg.template_every_layer || i == 0 {
                    x = x.add(t.features)?;
                }
            }
            x = block.forward(p, x, cfg.knn_k)?;
        }
        Ok(TokenSet {
            features: self.norm.forward(p, x)?,
            anchors: input.anchors.clone(),
        })
    }
}

/// Max-pooled global feature and an MLP regressing the `N0 x 3` coarse template.
#[derive(Clone, Debug)]
pub struct CoarseHead {
    mlp: Mlp,
}

impl CoarseHead {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(
                b,
                "coarse_head",
                &[cfg.width, cfg.coarse_hidden, cfg.template_points * 3],
                cfg.kernel_activation,
            )?,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        encoded: &TokenSet<'t, T>,
        cfg: &ModelConfig,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let global = encoded.features.reduce_max(0)?;
        let c = global.shape()[0];
        let flat = self
            .mlp
            .forward(p, broadcast_rows(global, 1)?.reshape(&[1, c])?)?;
        let coarse = flat.reshape(&[cfg.template_points, 3])?;
        Ok((coarse, global))
    }
}
