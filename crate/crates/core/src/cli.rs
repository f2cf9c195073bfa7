//! The `pcc` command line.
//!
//! Every failure ends with one JSON line on stderr,
//! `{"error":"<kind>","message":"..."}`, and a nonzero exit status.
//! `PCC_THREADS` sets the number of worker threads (default 1).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, substream, substream_at, Difficulty, SamplePair};
use crate::io::{self, CloudFormat};
use crate::model::ForwardSeeds;
use crate::train::{self, FitOptions, TrainState};
use crate::{gradsuite, Error, Result};

/// Resolved configuration written next to the training outputs.
pub const CONFIG_NAME: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(
    name = "pcc",
    version,
    about = "Template-guided point-cloud completion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of primitive shapes with a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated primitives: sphere, box, cylinder, cone, torus.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "sphere,box,cylinder,cone,torus"
        )]
        shapes: Vec<String>,
        /// Pairs per shape.
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2048)]
        partial_points: usize,
        #[arg(long, default_value_t = 2048)]
        complete_points: usize,
    },
    /// Train a model; writes config.txt, train_log.jsonl and checkpoints into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// `key=value` override applied after the config file; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Print the resolved configuration with every key and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Re-crop the complete clouds at a fixed difficulty.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Seed of the re-cropping.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print JSON records instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Complete one partial cloud.
    Complete {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output format; defaults to the extension of --out.
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Draw the template and value spheres from this seed instead of the evaluation seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        /// `all` or one of the suite's modules.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Easy,
    Median,
    Hard,
}

impl From<Mode> for Difficulty {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Easy => Difficulty::Easy,
            Mode::Median => Difficulty::Median,
            Mode::Hard => Difficulty::Hard,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Ply,
    Xyz,
}

impl From<Format> for CloudFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Ply => CloudFormat::PlyBinaryLe,
            Format::Xyz => CloudFormat::XyzAscii,
        }
    }
}

/// Stable machine-readable name of an error.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Tensor(_) => "tensor",
        Error::EmptyCloud(_) => "empty_cloud",
        Error::NotEnoughPoints { .. } => "not_enough_points",
        Error::DimensionMismatch { .. } => "dimension_mismatch",
        Error::NonFinitePoint(_) => "non_finite_point",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Invariant(_) => "invariant",
        Error::NonFiniteGradient(_) => "non_finite_gradient",
        Error::NonFiniteLoss(_) => "non_finite_loss",
        Error::Manifest { .. } => "manifest",
        Error::CloudFormat(_) => "cloud_format",
        Error::Checkpoint(_) => "checkpoint",
        Error::Config(_) => "config",
        Error::Io(_) => "io",
    }
}

/// The single-line error report.
pub fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn main_with_args<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let _ = writeln!(
                err,
                "{}",
                error_line("usage", first.trim_start_matches("error: "))
            );
            return 2;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(error_kind(&e), &e.to_string()));
            1
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData {
            out: dir,
            shapes,
            count,
            seed,
            partial_points,
            complete_points,
        } => {
            let names: Vec<&str> = shapes.iter().map(|s| s.trim()).collect();
            let pairs = data::gen_dataset(&names, count, partial_points, complete_points, seed)?;
            data::write_dataset(&dir, &pairs)?;
            writeln!(out, "wrote {} pairs to {}", pairs.len(), dir.display())?;
            Ok(())
        }
        Command::Train {
            config,
            data,
            out: out_dir,
            resume,
            seed,
            overrides,
            print_config,
        } => {
            let resumed = resume
                .as_deref()
                .map(|p| Checkpoint::read(existing(p)?))
                .transpose()?;
            let mut cfg = match &resumed {
                Some(ck) => ck.config.clone(),
                None => RunConfig::default(),
            };
            if let Some(path) = &config {
                cfg.merge(&std::fs::read_to_string(existing(path)?)?)?;
            }
            for o in &overrides {
                cfg.apply_override(o)?;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if data.is_some() {
                cfg.data = data;
            }
            if out_dir.is_some() {
                cfg.out = out_dir;
            }
            if print_config {
                write!(out, "{}", cfg.render())?;
                return Ok(());
            }
            train_command(cfg, resumed, out)
        }
        Command::Eval {
            ckpt,
            data,
            mode,
            seed,
            json,
        } => {
            let model = Checkpoint::read(existing(&ckpt)?)?.model()?;
            let mut pairs = data::load_dataset(existing(&data)?)?;
            if let Some(mode) = mode {
                recrop(&mut pairs, mode.into(), seed)?;
            }
            let report = train::evaluate(&model, &pairs)?;
            if json {
                write!(out, "{}", report.to_records())?;
            } else {
                write!(out, "{}", report.to_table())?;
            }
            Ok(())
        }
        Command::Complete {
            ckpt,
            input,
            out: path,
            format,
            seed,
        } => {
            let format = match format {
                Some(f) => f.into(),
                None => CloudFormat::from_path(&path).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "{}: cannot infer the format; pass --format",
                        path.display()
                    ))
                })?,
            };
            let model = Checkpoint::read(existing(&ckpt)?)?.model()?;
            let partial = io::read_cloud_auto(existing(&input)?)?;
            let dense = match seed {
                None => model.complete(&partial)?,
                Some(s) => {
                    let seeds = ForwardSeeds {
                        template: substream(s, "template"),
                        values: substream(s, "values"),
                        upsample: substream(s, "upsample"),
                    };
                    let tape = pcc_autograd::Tape::new();
                    let p = model.params.bind_frozen(&tape);
                    let pred = model.forward_bound(&p, &partial, seeds)?;
                    crate::PointCloud::from_tensor(&pred.dense.value())?
                }
            };
            io::write_cloud(&dense, &path, format)?;
            writeln!(out, "wrote {} points to {}", dense.len(), path.display())?;
            Ok(())
        }
        Command::GradCheck {
            module,
            seed,
            seeds,
        } => {
            let mut failed = 0;
            let mut total = 0;
            for s in seed..seed + seeds.max(1) {
                for r in gradsuite::run(&module, s)? {
                    writeln!(out, "{}", r.line())?;
                    total += 1;
                    failed += usize::from(!r.passed());
                }
            }
            writeln!(out, "{total} cases, {failed} failed")?;
            if failed > 0 {
                return Err(Error::Invariant(format!(
                    "{failed} of {total} gradient checks exceed relative error {}",
                    gradsuite::TOLERANCE
                )));
            }
            Ok(())
        }
    }
}

/// `path` itself, or an IO error naming it when nothing exists there.
fn existing(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{}: no such file or directory", path.display()),
        )
        .into())
    }
}

/// Replaces each partial cloud with a crop of its complete cloud at `difficulty`.
fn recrop(pairs: &mut [SamplePair], difficulty: Difficulty, seed: u64) -> Result<()> {
    for (i, pair) in pairs.iter_mut().enumerate() {
        pair.partial = data::crop_partial(
            &pair.complete,
            difficulty.keep_fraction(),
            pair.partial.len(),
            substream_at(seed, "eval-crop", i as u64),
        )?;
    }
    Ok(())
}

fn train_command(cfg: RunConfig, resumed: Option<Checkpoint>, out: &mut dyn Write) -> Result<()> {
    let data_dir = cfg.data.clone().ok_or_else(|| {
        Error::InvalidArgument("no dataset: pass --data or set paths.data".into())
    })?;
    let out_dir = cfg.out.clone().ok_or_else(|| {
        Error::InvalidArgument("no output directory: pass --out or set paths.out".into())
    })?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let mut state = match resumed {
        Some(ck) => {
            let mut diff = ck.config.differences(&cfg, "model.");
            diff.extend(ck.config.differences(&cfg, "train."));
            if !diff.is_empty() {
                return Err(
                    crate::checkpoint::CheckpointError::ConfigMismatch(diff.join(", ")).into(),
                );
            }
            ck.train_state()?
        }
        None => TrainState::new(cfg.model.clone(), cfg.train.clone())?,
    };
    let pairs = data::load_dataset(existing(&data_dir)?)?;
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join(CONFIG_NAME), cfg.render())?;
    let start = state.step;
    let records = train::fit(
        &mut state,
        &pairs,
        FitOptions {
            out_dir: Some(out_dir.clone()),
            progress: Some(&mut *out),
            stop_at: None,
        },
    )?;
    if let Some(last) = records.last() {
        writeln!(
            out,
            "trained steps {}..{}; final loss {:.6}; outputs in {}",
            start + 1,
            last.step,
            last.loss(),
            out_dir.display()
        )?;
    }
    Ok(())
}

/// Path of the checkpoint a finished run leaves in `out_dir`.
pub fn final_checkpoint(out_dir: &Path) -> PathBuf {
    out_dir.join(train::FINAL_CHECKPOINT)
}
