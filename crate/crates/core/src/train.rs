//! Adam with cosine annealing, the training loop and evaluation sweeps.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pcc_autograd::{ParamStore, Real, Tape};

use crate::checkpoint::Checkpoint;
use crate::data::{substream, substream_at, SamplePair};
use crate::metrics::{sample_metrics, training_loss, MetricsReport};
use crate::model::{ForwardSeeds, Model, ModelConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub base_lr: f64,
    /// `min_lr = base_lr * min_lr_ratio`.
    pub min_lr_ratio: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
    /// Evaluate the training pairs every this many steps; zero disables.
    pub eval_every: u64,
    /// Write a checkpoint every this many steps; zero writes only the final one.
    pub checkpoint_every: u64,
    /// Record `wall_ms` as zero so logs are reproducible byte for byte.
    pub deterministic: bool,
    /// Draw a fresh value sphere every step (evaluation always uses a fixed one).
    pub resample_values: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            base_lr: 1e-4,
            min_lr_ratio: 0.01,
            total_steps: 2000,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            eval_every: 0,
            checkpoint_every: 0,
            deterministic: true,
            resample_values: true,
        }
    }
}

impl TrainConfig {
    pub fn min_lr(&self) -> f64 {
        self.base_lr * self.min_lr_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidArgument("base_lr must be positive".into()));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "total_steps and batch_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::InvalidArgument(
                "min_lr_ratio must lie in [0, 1]".into(),
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0)
        {
            return Err(Error::InvalidArgument(
                "invalid Adam hyperparameters".into(),
            ));
        }
        Ok(())
    }
}

/// `min + (base - min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "cosine schedule step {step} outside 0..={total_steps}"
        )));
    }
    if step == 0 {
        return Ok(base_lr);
    }
    if step == total_steps {
        return Ok(min_lr);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + phase.cos()))
}

/// Bias-corrected Adam state, one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |_| Vec::new();
        let mut a = Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.ids().map(zeros).collect(),
            v: params.ids().map(zeros).collect(),
        };
        for (i, (_, p)) in params.iter().enumerate() {
            a.m[i] = vec![T::zero(); p.len()];
            a.v[i] = vec![T::zero(); p.len()];
        }
        a
    }

    /// One update; a missing gradient counts as zero.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
    ) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        if grads.len() != ids.len() {
            return Err(Error::DimensionMismatch {
                op: "adam_step",
                lhs: ids.len(),
                rhs: grads.len(),
            });
        }
        for (id, g) in ids.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != params.get(*id).len() {
                    return Err(Error::DimensionMismatch {
                        op: "adam_step",
                        lhs: params.get(*id).len(),
                        rhs: g.len(),
                    });
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(params.name(*id).to_string()));
                }
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, id) in ids.iter().enumerate() {
            let p = params.get_mut(*id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j].as_f64());
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
                m[j] = T::from_f64_lossy(mj);
                v[j] = T::from_f64_lossy(vj);
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                p[j] = T::from_f64_lossy(p[j].as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / (norm + 1e-6));
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub l0: f64,
    pub l1: f64,
    pub wall_ms: u64,
}

impl LogRecord {
    pub fn loss(&self) -> f64 {
        self.l0 + self.l1
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "step": self.step,
            "lr": self.lr,
            "l0": self.l0,
            "l1": self.l1,
            "wall_ms": self.wall_ms,
        })
        .to_string()
    }
}

/// Seeds of the named substreams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub data: u64,
    pub init: u64,
    pub sphere: u64,
}

impl RunSeeds {
    pub fn from_run_seed(seed: u64) -> Self {
        Self {
            data: substream(seed, "data"),
            init: substream(seed, "init"),
            sphere: substream(seed, "sphere"),
        }
    }

    /// Forward seeds of batch item `item` at 1-based `step`.
    pub fn step_seeds(&self, step: u64, item: usize, resample_values: bool) -> ForwardSeeds {
        let index = step * 1_000_003 + item as u64;
        ForwardSeeds {
            template: ForwardSeeds::EVAL.template,
            values: if resample_values {
                substream_at(self.sphere, "values", index)
            } else {
                ForwardSeeds::EVAL.values
            },
            upsample: substream_at(self.data, "upsample", index),
        }
    }
}

/// Everything a resumed run needs: parameters, optimizer state, step and seeds.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub train: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub seeds: RunSeeds,
}

impl TrainState {
    pub fn new(model_config: ModelConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let seeds = RunSeeds::from_run_seed(train.seed);
        let model = Model::new(model_config, seeds.init)?;
        let adam = Adam::new(&model.params, train.beta1, train.beta2, train.eps);
        Ok(Self {
            model,
            adam,
            train,
            step: 0,
            seeds,
        })
    }

    /// Dataset indices of the batch at 1-based `step`: a seeded shuffle per epoch.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let bs = self.train.batch_size;
        let start = (step - 1) as usize * bs;
        (start..start + bs)
            .map(|pos| {
                let epoch = (pos / n) as u64;
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(
                    substream_at(self.seeds.data, "shuffle", epoch),
                );
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                order[pos % n]
            })
            .collect()
    }

    /// Loss terms and parameter gradients of one pair.
    pub fn sample_gradients(
        model: &Model<f32>,
        pair: &SamplePair,
        seeds: ForwardSeeds,
    ) -> Result<(f64, f64, Vec<Option<Vec<f32>>>)> {
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let pred = model.forward_bound(&p, &pair.partial, seeds)?;
        let loss = training_loss(pred.fine, pred.dense, &pair.complete)?;
        let (l0, l1) = (loss.template.item() as f64, loss.dense.item() as f64);
        let mut grads = tape.backward(loss.total)?;
        Ok((l0, l1, p.collect(&mut grads)))
    }

    /// Runs one optimizer step on `data` and returns its log record.
    pub fn train_step(&mut self, data: &[SamplePair]) -> Result<LogRecord> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let started = Instant::now();
        let step = self.step + 1;
        if step > self.train.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} beyond total_steps {}",
                self.train.total_steps
            )));
        }
        let batch = self.batch_indices(step, data.len());
        let work: Vec<(usize, ForwardSeeds)> = batch
            .iter()
            .enumerate()
            .map(|(item, &i)| {
                (
                    i,
                    self.seeds
                        .step_seeds(step, item, self.train.resample_values),
                )
            })
            .collect();
        let results = parallel_map(&work, thread_count(), |&(i, seeds)| {
            Self::sample_gradients(&self.model, &data[i], seeds)
        });
        let mut l0 = 0.0;
        let mut l1 = 0.0;
        let mut total: Vec<Option<Vec<f32>>> = vec![None; self.model.params.len()];
        for r in results {
            let (a, b, grads) = r?;
            l0 += a;
            l1 += b;
            for (acc, g) in total.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(acc), Some(g)) => acc.iter_mut().zip(&g).for_each(|(x, y)| *x += *y),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        let n = batch.len() as f64;
        let (l0, l1) = (l0 / n, l1 / n);
        if !(l0.is_finite() && l1.is_finite()) {
            return Err(Error::NonFiniteLoss(step as usize));
        }
        if batch.len() > 1 {
            let s = 1.0 / n as f32;
            total
                .iter_mut()
                .flatten()
                .for_each(|g| g.iter_mut().for_each(|v| *v *= s));
        }
        clip_grad_norm(&mut total, self.train.clip_norm);
        let lr = cosine_lr(
            step - 1,
            self.train.total_steps,
            self.train.base_lr,
            self.train.min_lr(),
        )?;
        self.adam.step(&mut self.model.params, &total, lr)?;
        self.step = step;
        Ok(LogRecord {
            step,
            lr,
            l0,
            l1,
            wall_ms: if self.train.deterministic {
                0
            } else {
                started.elapsed().as_millis() as u64
            },
        })
    }
}

/// Worker threads from `PCC_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var("PCC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Maps `f` over `items` on up to `threads` threads; results keep input order.
fn parallel_map<I: Sync, R: Send>(
    items: &[I],
    threads: usize,
    f: impl Fn(&I) -> R + Sync,
) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Where and how `fit` reports progress.
#[derive(Default)]
pub struct FitOptions<'a> {
    /// Directory receiving `train_log.jsonl`, `last.ckpt` and `final.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Extra sink for log lines.
    pub progress: Option<&'a mut dyn Write>,
    /// Stop after this many completed steps instead of `total_steps`.
    pub stop_at: Option<u64>,
}

pub const LOG_NAME: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Trains until `total_steps` (or `stop_at`). On a non-finite loss the last good
/// state is written to `last.ckpt` before the error is returned.
pub fn fit(
    state: &mut TrainState,
    data: &[SamplePair],
    mut opts: FitOptions<'_>,
) -> Result<Vec<LogRecord>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let end = opts
        .stop_at
        .unwrap_or(state.train.total_steps)
        .min(state.train.total_steps);
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join(LOG_NAME))?,
            )
        }
        None => None,
    };
    let mut records = Vec::new();
    while state.step < end {
        let record = match state.train_step(data) {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = &opts.out_dir {
                    Checkpoint::from_state(state).write(&dir.join(LAST_CHECKPOINT))?;
                }
                return Err(e);
            }
        };
        let line = record.to_json();
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{line}")?;
        }
        if let Some(w) = opts.progress.as_mut() {
            writeln!(w, "{line}")?;
        }
        let step = record.step;
        records.push(record);
        if let Some(dir) = &opts.out_dir {
            let every = state.train.checkpoint_every;
            if every > 0 && step % every == 0 {
                Checkpoint::from_state(state).write(&dir.join(LAST_CHECKPOINT))?;
            }
        }
        let every = state.train.eval_every;
        if every > 0 && step % every == 0 {
            let report = evaluate(&state.model, data)?;
            if let Some(w) = opts.progress.as_mut() {
                writeln!(
                    w,
                    "step {step}: cd_l1 {:.6} cd_l2 {:.6} fscore {:.4}",
                    report.cd_l1, report.cd_l2, report.fscore
                )?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        let name = if state.step == state.train.total_steps {
            FINAL_CHECKPOINT
        } else {
            LAST_CHECKPOINT
        };
        Checkpoint::from_state(state).write(&dir.join(name))?;
    }
    Ok(records)
}

/// Metrics of the dense predictions against the complete clouds, with evaluation seeds.
pub fn evaluate<T: Real>(model: &Model<T>, data: &[SamplePair]) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let results = parallel_map(data, thread_count(), |pair| {
        let pred = model.complete(&pair.partial)?;
        sample_metrics(&pred, &pair.complete)
    });
    let mut samples = Vec::with_capacity(data.len());
    for (pair, r) in data.iter().zip(results) {
        samples.push((pair.category.as_str(), r?));
    }
    Ok(MetricsReport::from_samples(samples))
}

/// Reads a training log written by [`fit`].
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l)
                .map_err(|e| Error::InvalidArgument(format!("bad log line: {e}")))?;
            let num = |k: &str| {
                v[k].as_f64()
                    .ok_or_else(|| Error::InvalidArgument(format!("log line lacks `{k}`")))
            };
            Ok(LogRecord {
                step: num("step")? as u64,
                lr: num("lr")?,
                l0: num("l0")?,
                l1: num("l1")?,
                wall_ms: num("wall_ms")? as u64,
            })
        })
        .collect()
}
