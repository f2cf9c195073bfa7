//! Plain-text `key = value` run configuration with a fixed schema.
//!
//! Keys are `model.*`, `train.*` and `paths.*`; `#` starts a comment line.
//! Unknown or repeated keys are errors.

use std::path::PathBuf;

use thiserror::Error;

use crate::model::{Activation, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` set twice")]
    DuplicateKey { line: usize, key: String },
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("configuration mismatch: {0}")]
    Mismatch(String),
}

trait Value: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

impl Value for usize {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse()
            .map_err(|_| "expected a nonnegative integer".into())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse()
            .map_err(|_| "expected a nonnegative integer".into())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for f64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err("expected a finite number".into()),
        }
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl Value for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err("expected `true` or `false`".into()),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for Activation {
    fn parse_value(s: &str) -> Result<Self, String> {
        Activation::parse(s).ok_or_else(|| "expected `relu` or `gelu`".into())
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl Value for Option<PathBuf> {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn render(&self) -> String {
        self.as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    }
}

/// Model and training hyperparameters plus optional data/output paths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

macro_rules! schema {
    ($( $key:literal => $($field:ident).+ , $doc:literal ;)*) => {
        /// `(key, description)` for every accepted key, in dump order.
        pub const SCHEMA: &[(&str, &str)] = &[$(($key, $doc)),*];

        impl RunConfig {
            /// Current value of `key` in file syntax.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(Value::render(&self.$($field).+)),)*
                    _ => None,
                }
            }

            fn assign(&mut self, key: &str, value: &str) -> Option<Result<(), String>> {
                match key {
                    $($key => Some(Value::parse_value(value).map(|v| self.$($field).+ = v)),)*
                    _ => None,
                }
            }
        }
    };
}

schema! {
    "model.tokens" => model.tokens, "proxy tokens per cloud";
    "model.width" => model.width, "token width";
    "model.knn_k" => model.knn_k, "neighbors in coordinate and feature space";
    "model.enc_depth" => model.enc_depth, "encoder blocks";
    "model.dec_depth" => model.dec_depth, "decoder layers";
    "model.heads" => model.heads, "attention heads";
    "model.ffn_mult" => model.ffn_mult, "feed-forward width multiplier";
    "model.edge_width" => model.edge_width, "hidden width of the first edge convolution";
    "model.template_points" => model.template_points, "coarse and fine template size";
    "model.pool_template" => model.pool_template, "template points kept in the pool";
    "model.pool_input" => model.pool_input, "input points added to the pool";
    "model.up_factor" => model.up_factor, "dense points per template point";
    "model.template_oversample" => model.template_oversample, "sphere points per token before FPS";
    "model.sphere_channels" => model.sphere_channels, "value-sphere embedding width";
    "model.corres_width" => model.corres_width, "correspondence attention width";
    "model.vote_width" => model.vote_width, "voting network width";
    "model.fold_hidden" => model.fold_hidden, "folding network width";
    "model.fold_bound" => model.fold_bound, "bound on each folding offset coordinate";
    "model.grid_extent" => model.grid_extent, "half-width of the folding lattice";
    "model.coarse_hidden" => model.coarse_hidden, "coarse head hidden width";
    "model.kernel_activation" => model.kernel_activation, "activation inside point kernels (relu|gelu)";
    "model.ffn_activation" => model.ffn_activation, "activation inside feed-forward sublayers (relu|gelu)";
    "model.template_guide" => model.template_guide, "fuse sphere-template tokens into the encoder";
    "model.template_every_layer" => model.template_every_layer, "add the template before every encoder block";
    "model.corres_pooling" => model.corres_pooling, "correspondence pooling (false: coarse template passes through)";
    "model.drop_highest" => model.drop_highest, "drop highest-scoring template points (false: lowest)";
    "model.sphere_values" => model.sphere_values, "append the sphere embedding to decoder values";
    "model.fps_start" => model.fps_start, "farthest point sampling start index";
    "train.seed" => train.seed, "run seed for the data, init and sphere substreams";
    "train.base_lr" => train.base_lr, "initial learning rate";
    "train.min_lr_ratio" => train.min_lr_ratio, "final learning rate as a fraction of base_lr";
    "train.total_steps" => train.total_steps, "optimizer steps";
    "train.batch_size" => train.batch_size, "pairs per step";
    "train.beta1" => train.beta1, "Adam first-moment decay";
    "train.beta2" => train.beta2, "Adam second-moment decay";
    "train.eps" => train.eps, "Adam denominator epsilon";
    "train.clip_norm" => train.clip_norm, "global gradient-norm clip (0 disables)";
    "train.eval_every" => train.eval_every, "steps between evaluations (0 disables)";
    "train.checkpoint_every" => train.checkpoint_every, "steps between checkpoints (0: final only)";
    "train.deterministic" => train.deterministic, "log wall_ms as 0 for reproducible logs";
    "train.resample_values" => train.resample_values, "fresh value sphere every step";
    "paths.data" => data, "dataset directory";
    "paths.out" => out, "output directory";
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at(0, key, value)
    }

    fn set_at(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        match self.assign(key, value) {
            None => Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            }),
            Some(Err(reason)) => Err(ConfigError::InvalidValue {
                key: key.to_string(),
                value: value.to_string(),
                reason,
            }),
            Some(Ok(())) => Ok(()),
        }
    }

    /// Defaults overridden by every assignment in `text`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.merge(text)?;
        Ok(cfg)
    }

    pub fn merge(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: line.to_string(),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
            self.set_at(i + 1, key, value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax {
                line: 0,
                text: assignment.to_string(),
            })?;
        self.set(key.trim(), value.trim())
    }

    /// Every key with its current value and description.
    pub fn render(&self) -> String {
        self.render_prefixed("")
    }

    /// Only the keys starting with `prefix`.
    pub fn render_prefixed(&self, prefix: &str) -> String {
        let mut out = String::new();
        for (key, doc) in SCHEMA.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.push_str(&format!(
                "# {doc}\n{key} = {}\n",
                self.get(key).unwrap_or_default()
            ));
        }
        out
    }

    /// Keys whose values differ between `self` and `other`.
    pub fn differences(&self, other: &RunConfig, prefix: &str) -> Vec<String> {
        SCHEMA
            .iter()
            .map(|(k, _)| *k)
            .filter(|k| k.starts_with(prefix) && self.get(k) != other.get(k))
            .map(|k| {
                format!(
                    "{k}: {} vs {}",
                    self.get(k).unwrap_or_default(),
                    other.get(k).unwrap_or_default()
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.model.width = 96;
        cfg.train.base_lr = 3e-4;
        cfg.model.kernel_activation = Activation::Gelu;
        cfg.out = Some("runs/a".into());
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_readable() {
        let cfg = RunConfig::default();
        for (k, _) in SCHEMA {
            assert!(cfg.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            RunConfig::parse("model.widht = 3"),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("\nmodel.width"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("model.width = x"),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(matches!(
            RunConfig::parse("train.seed = 1\ntrain.seed = 2"),
            Err(ConfigError::DuplicateKey { line: 2, .. })
        ));
        assert!(RunConfig::parse("train.base_lr = nan").is_err());
    }

    #[test]
    fn overrides_and_differences() {
        let mut a = RunConfig::default();
        a.apply_override("model.heads=4").unwrap();
        assert_eq!(a.model.heads, 4);
        let d = a.differences(&RunConfig::default(), "model.");
        assert_eq!(d, vec!["model.heads: 4 vs 6".to_string()]);
    }
}
