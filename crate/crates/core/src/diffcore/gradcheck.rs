//! Finite-difference verification of backward passes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_samples_per_input: Option<usize>,
    /// Check this fraction of each input's elements (at least one).
    pub sample_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_samples_per_input: None,
            sample_fraction: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Sampled elements whose `+-eps` evaluations took a different branch of some
    /// piecewise op than the base point; the function is not differentiable there
    /// at this step size, so they are replaced by further samples.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub per_input: Vec<InputReport>,
    /// Set when an analytic or numeric gradient came out NaN/Inf.
    pub non_finite: bool,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_err <= tol
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    rel_err_beyond(a, n, 0.0)
}

/// Relative error of the part of `|a - n|` that exceeds `resolution`.
pub fn rel_err_beyond(a: f64, n: f64, resolution: f64) -> f64 {
    ((a - n).abs() - resolution).max(0.0) / a.abs().max(n.abs()).max(1e-8)
}

/// Smallest derivative difference a central difference can resolve: four ulps of the
/// evaluated function spread over the `2 eps` step. Gradients of order 1e-9 on an O(1)
/// loss sit at this floor.
pub fn fd_resolution(plus: f64, minus: f64, eps: f64) -> f64 {
    4.0 * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * eps)
}

fn reduce(tape: &mut Tape<f64>, out: Var) -> Var {
    if tape.value(out).numel() == 1 {
        out
    } else {
        tape.sum_all(out)
    }
}

/// `sum(f(inputs))` and the branch signature of the pass.
fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).sum(), tape.branch_signature()))
}

/// Compares the analytic gradient of `sum(f(inputs))` with central differences
/// `(f(x + eps) - f(x - eps)) / 2 eps`. Every input is treated as differentiable.
/// Elements whose perturbation crosses a kink are skipped (see [`InputReport::skipped`]),
/// and differences below [`fd_resolution`] are not counted as error.
pub fn grad_check<F>(f: F, inputs: &[(&str, Tensor<f64>)], cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let base_branches = tape.branch_signature();
    let root = reduce(&mut tape, out);
    let grads = tape.backward(root)?;

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradReport {
        max_rel_err: 0.0,
        per_input: Vec::new(),
        non_finite: false,
    };
    for (i, (name, t)) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(t.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zeros).clone();
        let by_fraction = cfg.sample_fraction.map(|f| ((t.numel() as f64 * f).ceil() as usize).max(1));
        let limit = match (cfg.max_samples_per_input, by_fraction) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        let (order, want): (Vec<usize>, usize) = match limit {
            Some(k) if k < t.numel() => (sample(&mut rng, t.numel(), t.numel()).into_vec(), k),
            _ => ((0..t.numel()).collect(), t.numel()),
        };
        let mut worst: f64 = 0.0;
        let (mut checked, mut skipped) = (0, 0);
        for &j in &order {
            if checked == want {
                break;
            }
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + cfg.epsilon;
            let (plus, bp) = evaluate(&f, &values)?;
            values[i].data_mut()[j] = orig - cfg.epsilon;
            let (minus, bm) = evaluate(&f, &values)?;
            values[i].data_mut()[j] = orig;
            if bp != base_branches || bm != base_branches {
                skipped += 1;
                continue;
            }
            checked += 1;
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let a = analytic.data()[j];
            if !a.is_finite() || !numeric.is_finite() {
                report.non_finite = true;
                worst = f64::INFINITY;
                continue;
            }
            let resolution = fd_resolution(plus, minus, cfg.epsilon);
            worst = worst.max(rel_err_beyond(a, numeric, resolution));
        }
        report.max_rel_err = report.max_rel_err.max(worst);
        report.per_input.push(InputReport {
            name: name.to_string(),
            max_rel_err: worst,
            checked,
            skipped,
        });
    }
    Ok(report)
}
