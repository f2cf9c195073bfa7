//! End-to-end completion network: tokenizer, template-fused encoder, coarse
//! template head, correspondence pooling, dynamic decoder and folding expansion.

pub mod corres;
pub mod decoder;
pub mod encoder;
pub mod nn;

use pcc_autograd::{ParamStore, Real, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{farthest_point_sample, sample_gaussian_sphere, PointCloud};
use crate::{Error, Result};

pub use corres::{CorresAttention, CorresPool, Provenance, QueryGenerator, QueryTokens, Voter};
pub use decoder::{Decoder, Folding, ValueEmbedding, ValueTokens};
pub use encoder::{CoarseHead, Encoder, TokenSet, Tokenizer};
pub use nn::Activation;

/// Every architectural hyperparameter, including the ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Proxy token count `M`.
    pub tokens: usize,
    /// Token width `C`.
    pub width: usize,
    /// Neighbors per token in coordinate and feature space.
    pub knn_k: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Hidden width of the first edge convolution.
    pub edge_width: usize,
    /// Coarse and fine template size `N0`.
    pub template_points: usize,
    /// Template points kept in the pool, `N3`.
    pub pool_template: usize,
    /// Input points added to the pool, `N4`.
    pub pool_input: usize,
    pub up_factor: usize,
    /// Sphere points per token before FPS for the template tokens.
    pub template_oversample: usize,
    /// Width `d_s` of the value-sphere embedding.
    pub sphere_channels: usize,
    pub corres_width: usize,
    pub vote_width: usize,
    pub fold_hidden: usize,
    /// Upper bound on each folding offset coordinate.
    pub fold_bound: f64,
    /// Half-width of the 2D folding lattice.
    pub grid_extent: f64,
    pub coarse_hidden: usize,
    pub kernel_activation: Activation,
    pub ffn_activation: Activation,
    /// Fuse sphere-template tokens into the encoder.
    pub template_guide: bool,
    /// Add the template at every encoder block instead of only the first.
    pub template_every_layer: bool,
    /// Use correspondence pooling and voting; otherwise the coarse template passes through.
    pub corres_pooling: bool,
    /// Drop the highest-scoring template points from the pool (otherwise the lowest).
    pub drop_highest: bool,
    /// Concatenate the sphere embedding to the decoder values (otherwise zeros).
    pub sphere_values: bool,
    pub fps_start: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tokens: 128,
            width: 192,
            knn_k: 16,
            enc_depth: 4,
            dec_depth: 4,
            heads: 6,
            ffn_mult: 4,
            edge_width: 64,
            template_points: 512,
            pool_template: 256,
            pool_input: 384,
            up_factor: 4,
            template_oversample: 4,
            sphere_channels: 32,
            corres_width: 64,
            vote_width: 64,
            fold_hidden: 128,
            fold_bound: 0.2,
            grid_extent: 0.05,
            coarse_hidden: 1024,
            kernel_activation: Activation::Relu,
            ffn_activation: Activation::Gelu,
            template_guide: true,
            template_every_layer: true,
            corres_pooling: true,
            drop_highest: true,
            sphere_values: true,
            fps_start: 0,
        }
    }
}

impl ModelConfig {
    /// A few-thousand-parameter network for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            tokens: 8,
            width: 8,
            knn_k: 3,
            enc_depth: 1,
            dec_depth: 1,
            heads: 2,
            ffn_mult: 2,
            edge_width: 4,
            template_points: 12,
            pool_template: 6,
            pool_input: 10,
            up_factor: 4,
            template_oversample: 2,
            sphere_channels: 4,
            corres_width: 6,
            vote_width: 6,
            fold_hidden: 8,
            coarse_hidden: 16,
            ..Self::default()
        }
    }

    /// Pool size `N1 = N3 + N4`.
    pub fn pool_size(&self) -> usize {
        self.pool_template + self.pool_input
    }

    pub fn dense_points(&self) -> usize {
        self.template_points * self.up_factor
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        let positive = [
            ("tokens", self.tokens),
            ("width", self.width),
            ("knn_k", self.knn_k),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("edge_width", self.edge_width),
            ("template_points", self.template_points),
            ("pool_input", self.pool_input),
            ("up_factor", self.up_factor),
            ("template_oversample", self.template_oversample),
            ("sphere_channels", self.sphere_channels),
            ("corres_width", self.corres_width),
            ("vote_width", self.vote_width),
            ("fold_hidden", self.fold_hidden),
            ("coarse_hidden", self.coarse_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.knn_k > self.tokens {
            return fail(format!(
                "knn_k {} exceeds tokens {}",
                self.knn_k, self.tokens
            ));
        }
        if self.width % self.heads != 0 {
            return fail(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if self.pool_template > self.template_points {
            return fail(format!(
                "pool_template {} exceeds template_points {}",
                self.pool_template, self.template_points
            ));
        }
        if self.template_points > self.pool_size() {
            return fail(format!(
                "template_points {} exceeds pool size {}",
                self.template_points,
                self.pool_size()
            ));
        }
        if !(self.fold_bound > 0.0 && self.fold_bound.is_finite()) {
            return fail("fold_bound must be positive".into());
        }
        if !(self.grid_extent >= 0.0 && self.grid_extent.is_finite()) {
            return fail("grid_extent must be nonnegative".into());
        }
        Ok(())
    }
}

/// Seeds for the stochastic parts of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardSeeds {
    /// Sphere behind the encoder template tokens.
    pub template: u64,
    /// Sphere concatenated to the decoder values.
    pub values: u64,
    /// Padding of inputs smaller than the token count.
    pub upsample: u64,
}

impl ForwardSeeds {
    /// Seeds used for evaluation and inference.
    pub const EVAL: ForwardSeeds = ForwardSeeds {
        template: 0x7e3a_11c5,
        values: 0x51f0_9d27,
        upsample: 0x0b8e_4462,
    };
}

/// Every intermediate a forward pass exposes.
pub struct Prediction<'t, T: Real> {
    pub coarse: Var<'t, T>,
    pub global: Var<'t, T>,
    pub encoded: TokenSet<'t, T>,
    pub correspondence: Option<Var<'t, T>>,
    pub pool: Option<CorresPool<'t, T>>,
    pub fine: Var<'t, T>,
    /// Origin of each fine-template point; all `Template` without pooling.
    pub fine_provenance: Vec<Provenance>,
    pub proxies: Var<'t, T>,
    pub dense: Var<'t, T>,
}

#[derive(Clone, Debug)]
struct Network {
    tokenizer: Tokenizer,
    encoder: Encoder,
    coarse: CoarseHead,
    corres: CorresAttention,
    voter: Voter,
    queries: QueryGenerator,
    values: ValueEmbedding,
    decoder: Decoder,
    folding: Folding,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    net: Network,
}

impl<T: Real> Model<T> {
    /// Builds the network with parameters drawn from `init_seed`.
    ///
    /// Parameters of disabled branches are still registered so checkpoints of
    /// ablated and full models share one layout.
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let b = &mut nn::Builder {
            store: &mut params,
            rng: &mut rng,
        };
        let net = Network {
            tokenizer: Tokenizer::new(b, &config)?,
            encoder: Encoder::new(b, &config)?,
            coarse: CoarseHead::new(b, &config)?,
            corres: CorresAttention::new(b, &config)?,
            voter: Voter::new(b, &config)?,
            queries: QueryGenerator::new(b, &config)?,
            values: ValueEmbedding::new(b, &config)?,
            decoder: Decoder::new(b, &config)?,
            folding: Folding::new(b, &config)?,
        };
        Ok(Self {
            config,
            params,
            net,
        })
    }

    /// Same architecture and parameters in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter() {
            params.add(name, t.cast()).expect("names are unique");
        }
        Model {
            config: self.config.clone(),
            params,
            net: self.net.clone(),
        }
    }

    /// Sphere template tokens: `M * oversample` sphere points reduced to `M` by FPS.
    pub fn template_cloud(&self, seed: u64) -> Result<PointCloud> {
        let cfg = &self.config;
        let sphere = sample_gaussian_sphere(cfg.tokens * cfg.template_oversample, seed)?;
        let idx = farthest_point_sample(&sphere, cfg.tokens, 0)?;
        sphere.select(&idx)
    }

    /// Full completion pipeline on one partial cloud, recorded on `tape`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        partial: &PointCloud,
        seeds: ForwardSeeds,
    ) -> Result<Prediction<'t, T>> {
        let p = self.params.bind(tape);
        self.forward_bound(&p, partial, seeds)
    }

    /// Forward pass with parameters already bound to a tape.
    pub fn forward_bound<'t>(
        &self,
        p: &pcc_autograd::BoundParams<'t, T>,
        partial: &PointCloud,
        seeds: ForwardSeeds,
    ) -> Result<Prediction<'t, T>> {
        let cfg = &self.config;
        let net = &self.net;
        let input = net.tokenizer.forward(p, partial, cfg, seeds.upsample)?;
        let template = if cfg.template_guide {
            let sphere = self.template_cloud(seeds.template)?;
            Some(net.tokenizer.forward(p, &sphere, cfg, seeds.upsample)?)
        } else {
            None
        };
        let encoded = net
            .encoder
            .encode_with_template(p, &input, template.as_ref(), cfg)?;
        let (coarse, global) = net.coarse.forward(p, &encoded, cfg)?;
        check_count("coarse template", coarse.shape()[0], cfg.template_points)?;

        let (fine, fine_provenance, pool, correspondence) = if cfg.corres_pooling {
            let scores = net.corres.forward(p, coarse, &input.anchors, cfg)?;
            let pool = corres::build_pool(coarse, scores, partial, cfg)?;
            check_count("corres pool", pool.provenance.len(), cfg.pool_size())?;
            let n_template = pool
                .provenance
                .iter()
                .filter(|&&s| s == Provenance::Template)
                .count();
            check_count("pool template points", n_template, cfg.pool_template)?;
            let (fine, provenance) = net.voter.select(p, &pool, cfg)?;
            (fine, provenance, Some(pool), Some(scores))
        } else {
            (
                coarse,
                vec![Provenance::Template; cfg.template_points],
                None,
                None,
            )
        };
        check_count("fine template", fine.shape()[0], cfg.template_points)?;

        let queries = net.queries.forward(p, fine, global)?;
        let values = net.values.forward(p, &encoded, seeds.values, cfg)?;
        let proxies = net.decoder.forward(p, &queries, &values, cfg)?;
        let dense = net.folding.forward(p, fine, proxies, cfg)?;
        check_count("dense output", dense.shape()[0], cfg.dense_points())?;
        Ok(Prediction {
            coarse,
            global,
            encoded,
            correspondence,
            pool,
            fine,
            fine_provenance,
            proxies,
            dense,
        })
    }

    /// Dense completion of `partial` with evaluation seeds.
    pub fn complete(&self, partial: &PointCloud) -> Result<PointCloud> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let pred = self.forward_bound(&p, partial, ForwardSeeds::EVAL)?;
        PointCloud::from_tensor(&pred.dense.value())
    }
}

fn check_count(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Invariant(format!(
            "{what}: expected {expected} points, got {got}"
        )));
    }
    Ok(())
}
