//! Value tokens, dynamic transformer decoder and folding expansion.

use pcc_autograd::{BoundParams, Real, Tensor, Var};

use super::corres::QueryTokens;
use super::encoder::{FeedForward, GeometryAwareAttention, TokenSet};
use super::nn::{Builder, LayerNorm, Linear, Mlp, MultiHeadAttention};
use super::ModelConfig;
use crate::geometry::sample_gaussian_sphere;
use crate::{Error, Result};

/// Decoder memory: encoder features joined row-by-row with an embedded fresh sphere.
pub struct ValueTokens<'t, T: Real> {
    pub features: Var<'t, T>,
    pub anchors: crate::geometry::PointCloud,
}

#[derive(Clone, Debug)]
pub struct ValueEmbedding {
    pub sphere: Mlp,
    project: Linear,
}

impl ValueEmbedding {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.sphere_channels;
        Ok(Self {
            sphere: Mlp::new(b, "values.sphere", &[3, d, d], cfg.kernel_activation)?,
            project: Linear::new(b, "values.project", cfg.width + d, cfg.width)?,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        encoded: &TokenSet<'t, T>,
        sphere_seed: u64,
        cfg: &ModelConfig,
    ) -> Result<ValueTokens<'t, T>> {
        let m = encoded.features.shape()[0];
        let tape = encoded.features.tape();
        let sphere = if cfg.sphere_values {
            let s = sample_gaussian_sphere(m, sphere_seed)?;
            self.sphere.forward(p, tape.constant(s.to_tensor::<T>()))?
        } else {
            tape.constant(Tensor::zeros(&[m, cfg.sphere_channels])?)
        };
        let joined = Var::concat(&[encoded.features, sphere], 1)?;
        Ok(ValueTokens {
            features: self.project.forward(p, joined)?,
            anchors: encoded.anchors.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attention: GeometryAwareAttention,
    query_norm: LayerNorm,
    memory_norm: LayerNorm,
    cross: MultiHeadAttention,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        x: Var<'t, T>,
        memory: Var<'t, T>,
        k: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.self_attention.forward(p, x, k)?;
        let q = self.query_norm.forward(p, x)?;
        let mem = self.memory_norm.forward(p, memory)?;
        let x = x.add(self.cross.forward(p, q, mem)?)?;
        self.ffn.forward(p, x)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    out: Linear,
}

impl Decoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.width;
        let layers = (0..cfg.dec_depth)
            .map(|i| {
                Ok(DecoderLayer {
                    self_attention: GeometryAwareAttention::new(
                        b,
                        &format!("decoder.{i}.geo"),
                        cfg,
                    )?,
                    query_norm: LayerNorm::new(b, &format!("decoder.{i}.cross_q_norm"), c)?,
                    memory_norm: LayerNorm::new(b, &format!("decoder.{i}.cross_kv_norm"), c)?,
                    cross: MultiHeadAttention::new(b, &format!("decoder.{i}.cross"), c, cfg.heads)?,
                    ffn: FeedForward::new(b, &format!("decoder.{i}.ffn"), cfg)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(b, "decoder.norm", c)?,
            out: Linear::new(b, "decoder.out", c, c)?,
        })
    }

    /// Proxies `[N0, C]`.
    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        queries: &QueryTokens<'t, T>,
        values: &ValueTokens<'t, T>,
        cfg: &ModelConfig,
    ) -> Result<Var<'t, T>> {
        let (qs, vs) = (queries.features.shape(), values.features.shape());
        if qs[1] != vs[1] {
            return Err(Error::DimensionMismatch {
                op: "dynamic_decode",
                lhs: qs[1],
                rhs: vs[1],
            });
        }
        let mut x = queries.features;
        for layer in &self.layers {
            x = layer.forward(p, x, values.features, cfg.knn_k)?;
        }
        self.out.forward(p, self.norm.forward(p, x)?)
    }
}

/// Most-square `rows x cols` factorization of `n` (rows <= cols).
pub fn grid_dims(n: usize) -> (usize, usize) {
    let mut rows = (n as f64).sqrt() as usize;
    while rows > 1 && n % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, n / rows)
}

/// `up_factor` lattice points in `[-extent, extent]^2`, row-major.
pub fn fold_grid(up_factor: usize, extent: f64) -> Result<Vec<[f64; 2]>> {
    if up_factor == 0 {
        return Err(Error::InvalidArgument("up_factor must be positive".into()));
    }
    let (rows, cols) = grid_dims(up_factor);
    let axis = |n: usize, i: usize| {
        if n == 1 {
            0.0
        } else {
            -extent + 2.0 * extent * i as f64 / (n - 1) as f64
        }
    };
    Ok((0..rows)
        .flat_map(|r| (0..cols).map(move |c| [axis(rows, r), axis(cols, c)]))
        .collect())
}

/// Per-point folding: `dense[i * up + u] = fine[i] + bound * tanh(f(proxy_i, g_u))`.
#[derive(Clone, Debug)]
pub struct Folding {
    proxy: Linear,
    grid: Linear,
    hidden: Linear,
    pub head: Linear,
}

impl Folding {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.fold_hidden;
        // The first layer acts on [proxy ; grid]; split so each proxy is projected once.
        let bound = 1.0 / ((cfg.width + 2) as f64).sqrt();
        let proxy = Linear {
            weight: b.uniform("fold.in.proxy.weight", &[cfg.width, h], bound)?,
            bias: Some(b.uniform("fold.in.bias", &[h], bound)?),
            input: cfg.width,
            output: h,
        };
        let grid = Linear {
            weight: b.uniform("fold.in.grid.weight", &[2, h], bound)?,
            bias: None,
            input: 2,
            output: h,
        };
        Ok(Self {
            proxy,
            grid,
            hidden: Linear::new(b, "fold.hidden", h, h)?,
            head: Linear::zeroed(b, "fold.head", h, 3)?,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        fine: Var<'t, T>,
        proxies: Var<'t, T>,
        cfg: &ModelConfig,
    ) -> Result<Var<'t, T>> {
        let n = fine.shape()[0];
        let up = cfg.up_factor;
        let tape = fine.tape();
        let lattice = fold_grid(up, cfg.grid_extent)?;
        let grid = Tensor::new(
            &[up, 2],
            lattice
                .iter()
                .flatten()
                .map(|&v| T::from_f64_lossy(v))
                .collect(),
        )?;
        let grid_h = self.grid.forward(p, tape.constant(grid))?;
        let group: Vec<usize> = (0..n * up).map(|j| j / up).collect();
        let cell: Vec<usize> = (0..n * up).map(|j| j % up).collect();
        let proxy_h = self.proxy.forward(p, proxies)?;
        let h = cfg
            .kernel_activation
            .apply(proxy_h.gather(&group, 0)?.add(grid_h.gather(&cell, 0)?)?);
        let h = cfg.kernel_activation.apply(self.hidden.forward(p, h)?);
        let offsets = self
            .head
            .forward(p, h)?
            .tanh()
            .scale(T::from_f64_lossy(cfg.fold_bound));
        Ok(fine.gather(&group, 0)?.add(offsets)?)
    }
}
