//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u64`-prefixed UTF-8
//! configuration dump, `u64` step, three `u64` substream seeds, `u32` parameter
//! count, then per parameter a `u32`-prefixed name, `u32` rank, `u64` extents and
//! `f32` values; an optimizer flag byte followed (when set) by the Adam step,
//! hyperparameters and both moment vectors in parameter order; finally the
//! SHA-256 digest of everything before it.

use std::path::Path;

use pcc_autograd::Tensor;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::model::Model;
use crate::train::{Adam, RunSeeds, TrainState};
use crate::Result;

pub const MAGIC: &[u8; 8] = b"PCCCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint digest mismatch")]
    DigestMismatch,
    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("model configuration differs from checkpoint: {0}")]
    ConfigMismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub seeds: RunSeeds,
    pub params: Vec<(String, Tensor<f32>)>,
    pub adam: Option<Adam<f32>>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            config: RunConfig {
                model: state.model.config.clone(),
                train: state.train.clone(),
                ..RunConfig::default()
            },
            step: state.step,
            seeds: state.seeds,
            params: state
                .model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            adam: Some(state.adam.clone()),
        }
    }

    /// Parameters only, e.g. for inference.
    pub fn from_model(model: &Model<f32>, config: RunConfig) -> Self {
        Self {
            config,
            step: 0,
            seeds: RunSeeds::from_run_seed(0),
            params: model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            adam: None,
        }
    }

    /// Copies the stored parameters into `model`, whose configuration must match.
    pub fn restore_model(&self, model: &mut Model<f32>) -> Result<()> {
        let probe = RunConfig {
            model: model.config.clone(),
            ..self.config.clone()
        };
        let diff = self.config.differences(&probe, "model.");
        if !diff.is_empty() {
            return Err(CheckpointError::ConfigMismatch(diff.join(", ")).into());
        }
        for (name, t) in &self.params {
            let id = model
                .params
                .id_of(name)
                .ok_or_else(|| CheckpointError::UnknownParam(name.clone()))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: slot.shape().to_vec(),
                }
                .into());
            }
            *slot = t.clone();
        }
        if self.params.len() != model.params.len() {
            let missing = model
                .params
                .iter()
                .map(|(n, _)| n)
                .find(|n| !self.params.iter().any(|(m, _)| m == n))
                .unwrap_or_default();
            return Err(CheckpointError::MissingParam(missing.to_string()).into());
        }
        Ok(())
    }

    /// A model built from the stored configuration with the stored parameters.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.config.model.clone(), self.seeds.init)?;
        self.restore_model(&mut model)?;
        Ok(model)
    }

    /// Training state that continues exactly where this checkpoint stopped.
    pub fn train_state(&self) -> Result<TrainState> {
        let model = self.model()?;
        let adam = match &self.adam {
            Some(a) => a.clone(),
            None => Adam::new(
                &model.params,
                self.config.train.beta1,
                self.config.train.beta2,
                self.config.train.eps,
            ),
        };
        Ok(TrainState {
            model,
            adam,
            train: self.config.train.clone(),
            step: self.step,
            seeds: self.seeds,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.render();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for s in [self.seeds.data, self.seeds.init, self.seeds.sphere] {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            write_f32s(&mut out, t.data());
        }
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.t.to_le_bytes());
                for h in [a.beta1, a.beta2, a.eps] {
                    out.extend_from_slice(&h.to_le_bytes());
                }
                for (m, v) in a.m.iter().zip(&a.v) {
                    write_f32s(&mut out, m);
                    write_f32s(&mut out, v);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        if bytes.len() < r.pos + 32 {
            return Err(r.malformed("file shorter than its digest").into());
        }
        let body_end = bytes.len() - 32;
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(CheckpointError::DigestMismatch.into());
        }
        r.bytes = &bytes[..body_end];

        let text_len = r.u64()? as usize;
        let at = r.pos;
        let text =
            std::str::from_utf8(r.take(text_len)?).map_err(|_| CheckpointError::Malformed {
                offset: at,
                reason: "configuration is not UTF-8".into(),
            })?;
        let config = RunConfig::parse(text)?;
        let step = r.u64()?;
        let seeds = RunSeeds {
            data: r.u64()?,
            init: r.u64()?,
            sphere: r.u64()?,
        };
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed {
                    offset: at,
                    reason: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let at = r.pos;
            let data = r.f32s(n)?;
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed {
                offset: at,
                reason: e.to_string(),
            })?;
            params.push((name, t));
        }
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for (_, p) in &params {
                    m.push(r.f32s(p.len())?);
                    v.push(r.f32s(p.len())?);
                }
                Some(Adam {
                    beta1,
                    beta2,
                    eps,
                    t,
                    m,
                    v,
                })
            }
            _ => return Err(r.malformed("invalid optimizer flag").into()),
        };
        if r.pos != r.bytes.len() {
            return Err(r.malformed("unexpected trailing data").into());
        }
        Ok(Self {
            config,
            step,
            seeds,
            params,
            adam,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn malformed(&self, reason: &str) -> CheckpointError {
        CheckpointError::Malformed {
            offset: self.pos,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.malformed("unexpected end of data").into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| self.malformed("length overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::train::TrainConfig;
    use crate::Error;

    fn state() -> TrainState {
        TrainState::new(ModelConfig::tiny(), TrainConfig::default()).unwrap()
    }

    fn ckpt_err(e: Error) -> CheckpointError {
        match e {
            Error::Checkpoint(c) => c,
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn save_load_save_is_bitwise() {
        let bytes = Checkpoint::from_state(&state()).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Checkpoint::from_state(&state()).to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert_eq!(
            ckpt_err(Checkpoint::from_bytes(&bytes).unwrap_err()),
            CheckpointError::DigestMismatch
        );
        let mut bytes = Checkpoint::from_state(&state()).to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            ckpt_err(Checkpoint::from_bytes(&bytes).unwrap_err()),
            CheckpointError::VersionMismatch { found: 9, .. }
        ));
        assert_eq!(
            ckpt_err(Checkpoint::from_bytes(b"nope").unwrap_err()),
            CheckpointError::BadMagic
        );
    }

    #[test]
    fn config_mismatch() {
        let ck = Checkpoint::from_state(&state());
        let mut cfg = ModelConfig::tiny();
        cfg.width = 12;
        let mut other = Model::new(cfg, 0).unwrap();
        let err = ckpt_err(ck.restore_model(&mut other).unwrap_err());
        assert!(matches!(err, CheckpointError::ConfigMismatch(ref s) if s.contains("model.width")));
    }

    #[test]
    fn unknown_parameter() {
        let mut ck = Checkpoint::from_state(&state());
        ck.params[0].0 = "ghost.weight".into();
        let mut model = ck.config.model.clone();
        model.fps_start = 0;
        let mut m = Model::new(model, 0).unwrap();
        let err = ckpt_err(ck.restore_model(&mut m).unwrap_err());
        assert_eq!(err, CheckpointError::UnknownParam("ghost.weight".into()));
    }
}
