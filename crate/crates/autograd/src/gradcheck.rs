//! Finite-difference verification of tape gradients with a fourth-order
//! central stencil.
//!
//! The checker only evaluates the forward function, so it is independent of
//! every backward rule it verifies. Stop-gradients are held at their values
//! from the unperturbed point, so a function like `x * detach(x)` is checked
//! as `x * x0`.

use crate::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Coordinates perturbed per input; `None` checks all of them.
    pub max_coords: Option<usize>,
    /// Relative inconsistency between the one- and two-step curvature estimates
    /// that marks a kink inside the stencil; the coordinate is skipped.
    pub kink_tolerance: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords: None,
            kink_tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    /// (input, coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl CheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance && self.checked > 0
    }

    pub fn merge(&mut self, other: &CheckReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central differences.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, opts: &CheckOptions) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    check_with(inputs, f, opts)
}

/// [`check`] for functions with their own error type.
pub fn check_with<F, E>(
    inputs: &[Tensor<f64>],
    f: F,
    opts: &CheckOptions,
) -> std::result::Result<CheckReport, E>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> std::result::Result<Var<'t, f64>, E>,
    E: From<TensorError>,
{
    let detached;
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        detached = tape.detached_values();
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect()
    };
    let eval = |perturbed: &[Tensor<f64>]| -> std::result::Result<f64, E> {
        let tape = Tape::new();
        tape.replay_detached(detached.clone());
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let base = eval(inputs)?;
    let mut report = CheckReport::default();
    let mut work = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => (0..k).map(|j| j * n / k + (n / k) / 2).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = input.data()[c];
            let h = opts.step;
            let mut at = |offset: f64| -> std::result::Result<f64, E> {
                work[ii].data_mut()[c] = orig + offset;
                eval(&work)
            };
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            work[ii].data_mut()[c] = orig;
            // Fourth-order central difference.
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            // A smooth function has (c2 - 2 c1) = O(h^3); a slope jump inside the stencil does not.
            let c1 = (p1 - 2.0 * base + m1) / h;
            let c2 = (p2 - 2.0 * base + m2) / (2.0 * h);
            if (c2 - 2.0 * c1).abs() > opts.kink_tolerance * numeric.abs().max(opts.floor) {
                report.skipped_kinks += 1;
                continue;
            }
            let a = analytic[ii][c];
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((ii, c, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
