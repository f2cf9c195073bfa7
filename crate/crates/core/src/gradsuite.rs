//! Central finite-difference checks of every differentiable op and of the
//! training loss with respect to each module's parameters, in 64-bit.
//!
//! Module cases use [`ModelConfig::tiny`] with GELU everywhere so the only
//! non-smooth points left are max pooling, nearest-neighbor matching and
//! selection; coordinates whose one-sided slopes disagree are reported as
//! kinks and skipped.

use pcc_autograd::gradcheck::{check_with, CheckOptions, CheckReport};
use pcc_autograd::{BoundParams, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_synthetic_pair, substream, Primitive, SamplePair};
use crate::metrics::{chamfer_l1_var, training_loss};
use crate::model::nn::straight_through_gate;
use crate::model::{Activation, ForwardSeeds, Model, ModelConfig};
use crate::{Error, Result};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Module names accepted by [`run`], besides `all`.
pub const MODULES: &[&str] = &[
    "ops",
    "loss",
    "tokenizer",
    "encoder",
    "coarse",
    "corres",
    "vote",
    "queries",
    "values",
    "decoder",
    "folding",
    "end-to-end",
];

/// Parameter-name prefix of each model module.
const PREFIXES: &[(&str, &str)] = &[
    ("tokenizer", "tokenizer."),
    ("encoder", "encoder."),
    ("coarse", "coarse_head."),
    ("corres", "corres."),
    ("vote", "vote"),
    ("queries", "queries."),
    ("values", "values."),
    ("decoder", "decoder."),
    ("folding", "fold."),
    ("end-to-end", ""),
];

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub module: &'static str,
    pub case: &'static str,
    pub seed: u64,
    pub report: CheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passed(TOLERANCE)
    }

    /// One report line: `PASS|FAIL module/case seed=.. checked=.. kinks=.. max_rel=..`.
    pub fn line(&self) -> String {
        format!(
            "{} {}/{} seed={} checked={} kinks={} max_rel={:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.module,
            self.case,
            self.seed,
            self.report.checked,
            self.report.skipped_kinks,
            self.report.max_rel_error
        )
    }
}

fn options(max_coords: Option<usize>) -> CheckOptions {
    CheckOptions {
        tolerance: TOLERANCE,
        max_coords,
        ..CheckOptions::default()
    }
}

/// Runs `module` (or every module for `all`) with inputs drawn from `seed`.
pub fn run(module: &str, seed: u64) -> Result<Vec<CaseResult>> {
    if module == "all" {
        let mut out = Vec::new();
        for m in MODULES {
            out.extend(run(m, seed)?);
        }
        return Ok(out);
    }
    match module {
        "ops" => op_cases(seed),
        "loss" => loss_cases(seed),
        _ => {
            let (name, prefix) = PREFIXES.iter().find(|(m, _)| *m == module).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown module `{module}`; expected all or one of {}",
                    MODULES.join(", ")
                ))
            })?;
            Ok(vec![model_case(name, prefix, seed)?])
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).expect("valid shape")
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
    .expect("valid shape")
}

/// `sum(y * w)` with a fixed weight tensor, so every output entry matters differently.
fn project<'t>(y: Var<'t, f64>, w: &Tensor<f64>) -> Result<Var<'t, f64>> {
    let w = y.tape().constant(w.clone().reshaped(&y.shape())?);
    Ok(y.mul(w)?.sum())
}

type OpFn = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>], &Tensor<f64>) -> Result<Var<'t, f64>>;

fn op_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, "gradcheck.ops"));
    let u = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s);
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, usize, OpFn)> = vec![
        (
            "matmul",
            vec![u(&mut rng, &[3, 4]), u(&mut rng, &[4, 5])],
            15,
            |_, v, w| project(v[0].matmul(v[1])?, w),
        ),
        (
            "matmul_batched",
            vec![u(&mut rng, &[2, 3, 4]), u(&mut rng, &[2, 4, 2])],
            12,
            |_, v, w| project(v[0].matmul(v[1])?, w),
        ),
        (
            "matmul_shared_rhs",
            vec![u(&mut rng, &[2, 3, 4]), u(&mut rng, &[4, 2])],
            12,
            |_, v, w| project(v[0].matmul(v[1])?, w),
        ),
        (
            "add_broadcast",
            vec![u(&mut rng, &[3, 4]), u(&mut rng, &[4])],
            12,
            |_, v, w| project(v[0].add(v[1])?.mul(v[0])?, w),
        ),
        (
            "sub_broadcast",
            vec![u(&mut rng, &[4]), u(&mut rng, &[2, 4])],
            8,
            |_, v, w| project(v[0].sub(v[1])?.mul(v[1])?, w),
        ),
        (
            "mul_broadcast",
            vec![u(&mut rng, &[2, 3]), u(&mut rng, &[3])],
            6,
            |_, v, w| project(v[0].mul(v[1])?, w),
        ),
        ("scale_offset_neg", vec![u(&mut rng, &[5])], 5, |_, v, w| {
            project(v[0].scale(1.7).add_scalar(0.3).neg().mul(v[0])?, w)
        }),
        (
            "relu",
            vec![away_from_zero(&mut rng, &[6])],
            6,
            |_, v, w| project(v[0].relu(), w),
        ),
        (
            "gelu",
            vec![u(&mut rng, &[6]).reshaped(&[2, 3])?],
            6,
            |_, v, w| project(v[0].scale(2.0).gelu(), w),
        ),
        ("tanh", vec![u(&mut rng, &[6])], 6, |_, v, w| {
            project(v[0].scale(2.0).tanh(), w)
        }),
        ("sigmoid", vec![u(&mut rng, &[6])], 6, |_, v, w| {
            project(v[0].scale(3.0).sigmoid(), w)
        }),
        ("softmax", vec![u(&mut rng, &[2, 3, 4])], 24, |_, v, w| {
            let a = v[0].scale(2.0);
            let s = a.softmax(0)?.add(a.softmax(1)?)?.add(a.softmax(2)?)?;
            project(s, w)
        }),
        ("reduce_max", vec![u(&mut rng, &[3, 4, 2])], 6, |_, v, w| {
            let m = v[0]
                .reduce_max(1)?
                .add(v[0].reduce_max(0)?.reduce_max(0)?)?;
            project(m, w)
        }),
        ("sum_mean", vec![u(&mut rng, &[3, 4])], 1, |_, v, w| {
            let s = v[0].mul(v[0])?.sum().add(v[0].mean())?;
            project(s, w)
        }),
        (
            "sum_mean_axis",
            vec![u(&mut rng, &[3, 4, 2])],
            8,
            |_, v, w| {
                let a = v[0].mul(v[0])?;
                project(a.sum_axis(0)?.add(a.mean_axis(0)?)?, w)
            },
        ),
        (
            "concat",
            vec![u(&mut rng, &[2, 3]), u(&mut rng, &[2, 1])],
            8,
            |_, v, w| {
                project(
                    Var::concat(&[v[0], v[1]], 1)?.mul(Var::concat(&[v[1], v[0]], 1)?)?,
                    w,
                )
            },
        ),
        ("gather", vec![u(&mut rng, &[4, 3])], 15, |_, v, w| {
            project(
                v[0].gather(&[3, 0, 3, 1, 3], 0)?
                    .mul(v[0].gather(&[0, 1, 2, 1, 0], 0)?)?,
                w,
            )
        }),
        (
            "layer_norm",
            vec![u(&mut rng, &[3, 5]), u(&mut rng, &[5]), u(&mut rng, &[5])],
            15,
            |_, v, w| project(v[0].scale(2.0).layer_norm(v[1], v[2], 1e-5)?, w),
        ),
        (
            "reshape_permute_transpose",
            vec![u(&mut rng, &[2, 3, 4])],
            24,
            |_, v, w| {
                let p = v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?;
                let t = v[0].reshape(&[6, 4])?.transpose()?;
                project(p.mul(t)?, w)
            },
        ),
        (
            "row_norm",
            vec![away_from_zero(&mut rng, &[4, 3])],
            4,
            |_, v, w| project(v[0].row_norm()?, w),
        ),
        ("detach", vec![u(&mut rng, &[5])], 5, |_, v, w| {
            project(v[0].mul(v[0].detach())?.add(v[0])?, w)
        }),
        (
            "straight_through_gate",
            vec![u(&mut rng, &[4, 3]), u(&mut rng, &[4])],
            12,
            |_, v, w| project(straight_through_gate(v[0], v[1])?, w),
        ),
    ];
    let mut out = Vec::new();
    for (case, inputs, n_out, f) in cases {
        let w = uniform(&mut rng, &[n_out]);
        let report =
            check_with::<_, Error>(&inputs, |tape, vars| f(tape, vars, &w), &options(None))?;
        out.push(CaseResult {
            module: "ops",
            case,
            seed,
            report,
        });
    }
    Ok(out)
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Result<crate::PointCloud> {
    crate::PointCloud::new(
        (0..n)
            .map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0f32..1.0)))
            .collect(),
    )
}

fn loss_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, "gradcheck.loss"));
    let gt = random_cloud(&mut rng, 20)?;
    let pred = uniform(&mut rng, &[16, 3]);
    let fine = uniform(&mut rng, &[9, 3]);
    let chamfer = check_with::<_, Error>(
        std::slice::from_ref(&pred),
        |_, v| chamfer_l1_var(v[0], &gt),
        &options(None),
    )?;
    let total = check_with::<_, Error>(
        &[fine, pred],
        |_, v| Ok(training_loss(v[0], v[1], &gt)?.total),
        &options(None),
    )?;
    Ok(vec![
        CaseResult {
            module: "loss",
            case: "chamfer_l1",
            seed,
            report: chamfer,
        },
        CaseResult {
            module: "loss",
            case: "training_loss",
            seed,
            report: total,
        },
    ])
}

/// The tiny configuration with smooth activations used by the model cases.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        kernel_activation: Activation::Gelu,
        ffn_activation: Activation::Gelu,
        ..ModelConfig::tiny()
    }
}

/// Model with a randomized folding head, so the decoder path carries gradient.
fn check_model(seed: u64) -> Result<Model<f64>> {
    let mut model = Model::<f64>::new(check_config(), substream(seed, "gradcheck.init"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, "gradcheck.head"));
    for name in ["fold.head.weight", "fold.head.bias"] {
        let id = model
            .params
            .id_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
        for v in model.params.get_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    Ok(model)
}

fn check_pair(model: &Model<f64>, seed: u64) -> Result<SamplePair> {
    let shapes = ["sphere", "box", "cylinder", "cone", "torus"];
    let shape = Primitive::named(shapes[(seed % shapes.len() as u64) as usize])?;
    let n_partial = model.config.tokens * 3;
    let n_complete = model.config.dense_points();
    let mut pair = gen_synthetic_pair(
        shape,
        n_partial,
        n_complete,
        None,
        substream(seed, "gradcheck.data"),
    )?;
    // Ground truth from an independent surface sample, so no input point
    // coincides with a target point where the unsquared distance has a kink.
    pair.complete = gen_synthetic_pair(
        shape,
        1,
        n_complete,
        None,
        substream(seed, "gradcheck.target"),
    )?
    .complete;
    Ok(pair)
}

fn model_case(module: &'static str, prefix: &str, seed: u64) -> Result<CaseResult> {
    let model = check_model(seed)?;
    let pair = check_pair(&model, seed)?;
    let seeds = ForwardSeeds {
        template: substream(seed, "gradcheck.template"),
        values: substream(seed, "gradcheck.values"),
        upsample: substream(seed, "gradcheck.upsample"),
    };
    let ids: Vec<_> = model.params.ids().collect();
    let checked: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, id)| model.params.name(**id).starts_with(prefix))
        .map(|(i, _)| i)
        .collect();
    let inputs: Vec<Tensor<f64>> = checked
        .iter()
        .map(|&i| model.params.get(ids[i]).clone())
        .collect();
    let max_coords = if prefix.is_empty() { 1 } else { 3 };
    let report = check_with::<_, Error>(
        &inputs,
        |tape, vars| {
            let mut bound = Vec::with_capacity(ids.len());
            let mut next = 0;
            for (i, id) in ids.iter().enumerate() {
                if checked.get(next) == Some(&i) {
                    bound.push(vars[next]);
                    next += 1;
                } else {
                    bound.push(tape.constant(model.params.get(*id).clone()));
                }
            }
            let p = BoundParams::from_vars(bound);
            let pred = model.forward_bound(&p, &pair.partial, seeds)?;
            Ok(training_loss(pred.fine, pred.dense, &pair.complete)?.total)
        },
        &options(Some(max_coords)),
    )?;
    Ok(CaseResult {
        module,
        case: "training_loss",
        seed,
        report,
    })
}
