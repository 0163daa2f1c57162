//! Central finite-difference checking of analytic gradients (64-bit only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{ensure, Result};
use crate::params::{Bound, Kind, ParamStore};

/// Worst disagreement found for one input tensor.
#[derive(Clone, Debug, Serialize)]
pub struct InputReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub step: f64,
    pub rtol: f64,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|r| r.max_rel_error < self.rtol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

/// Reduces an arbitrary-shape output to a scalar with fixed pseudo-random
/// weights so every output element contributes a distinct direction.
pub(crate) fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let w = g.constant(Tensor::new(&shape, w)?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn graph(training: bool) -> Graph<f64> {
    if training {
        Graph::training()
    } else {
        Graph::new()
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], training: bool, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = graph(training);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let root = project(&mut g, out)?;
    Ok(g.value(root).item())
}

/// Rounding noise of a central difference of the projection of `out`; the
/// terms of the projected sum, not the sum itself, set the scale.
fn noise_floor(g: &Graph<f64>, out: Var, step: f64) -> f64 {
    let magnitude: f64 = g.value(out).data().iter().map(|v| 1.5 * v.abs()).sum();
    64.0 * f64::EPSILON * magnitude.max(1.0) / step
}

/// Compares the backward pass of `f` against central finite differences.
///
/// The relative error of element `j` is `|a - n| / max(|a|, |n|, floor)`
/// where `floor = 1e-3 * max_j |n_j|` plus the rounding noise of the
/// difference quotient; elements whose gradient is negligible next to the
/// rest of the tensor are compared on that scale.
pub fn gradient_check<F>(
    op: &str,
    inputs: &[Tensor<f64>],
    step: f64,
    rtol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_inputs(op, inputs, step, rtol, false, f)
}

/// Same as [`gradient_check`] but evaluates `f` in training graphs, where
/// batch normalization uses batch statistics.
pub fn gradient_check_training<F>(
    op: &str,
    inputs: &[Tensor<f64>],
    step: f64,
    rtol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_inputs(op, inputs, step, rtol, true, f)
}

fn compare(index: usize, analytic: &[f64], numeric: &[f64], elements: &[usize], floor: f64) -> InputReport {
    let mut report = InputReport {
        index,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_element: elements.first().copied().unwrap_or(0),
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for ((&j, &a), &n) in elements.iter().zip(analytic).zip(numeric) {
        let abs = (a - n).abs();
        let rel = if abs.is_nan() {
            f64::INFINITY
        } else {
            abs / a.abs().max(n.abs()).max(floor)
        };
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_element = j;
            report.analytic = a;
            report.numeric = n;
        }
    }
    report
}

fn check_inputs<F>(
    op: &str,
    inputs: &[Tensor<f64>],
    step: f64,
    rtol: f64,
    training: bool,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    ensure!(step > 0.0, "gradient_check", "step must be positive");
    let mut g = graph(training);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let root = project(&mut g, out)?;
    g.backward(root)?;
    let noise = noise_floor(&g, out, step);

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = evaluate(&probe, training, &f)?;
            probe[i].data_mut()[j] = orig - step;
            let down = evaluate(&probe, training, &f)?;
            probe[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let elements: Vec<usize> = (0..analytic.len()).collect();
        let report = compare(i, &analytic, &numeric, &elements, 1e-3 * scale + noise);
        reports.push(report);
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        step,
        rtol,
        inputs: reports,
    })
}

/// Finite-difference check of parameter gradients for a module built by
/// `f` from bound parameters. Up to `per_tensor` entries of every weight
/// accepted by `trainable` are probed, chosen by `seed`. The tolerance floor
/// is `1e-3` of the largest analytic gradient of the tensor, but at least
/// `1e-5` of the largest over all probed tensors: deep modules leave some
/// parameters (a bias feeding a normalization) with an exactly zero
/// gradient, for which the difference quotient is pure rounding noise.
#[allow(clippy::too_many_arguments)]
pub fn parameter_check<F>(
    op: &str,
    store: &ParamStore,
    trainable: impl Fn(&str) -> bool,
    per_tensor: usize,
    seed: u64,
    step: f64,
    rtol: f64,
    training: bool,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    ensure!(step > 0.0, "parameter_check", "step must be positive");
    let run = |s: &ParamStore| -> Result<f64> {
        let mut g = graph(training);
        let p = s.bind(&mut g, |_| false);
        let out = f(&mut g, &p)?;
        let root = project(&mut g, out)?;
        Ok(g.value(root).item())
    };
    let mut g = graph(training);
    let p = store.bind(&mut g, &trainable);
    let out = f(&mut g, &p)?;
    let root = project(&mut g, out)?;
    g.backward(root)?;
    let noise = noise_floor(&g, out, step);
    let grads = store.gradients(&g, &p);

    let global = store
        .iter()
        .zip(&grads)
        .filter(|((_, p), _)| p.kind == Kind::Weight && trainable(&p.name))
        .flat_map(|(_, g)| g.iter().flatten())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut reports = Vec::new();
    for ((id, param), grad) in store.iter().zip(&grads) {
        if param.kind != Kind::Weight || !trainable(&param.name) {
            continue;
        }
        let full = grad.clone().unwrap_or_else(|| vec![0.0; param.value.numel()]);
        let n = full.len();
        let elements: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut analytic = Vec::with_capacity(elements.len());
        let mut numeric = Vec::with_capacity(elements.len());
        for &j in &elements {
            let orig = param.value.data()[j];
            probe.value_mut(id).data_mut()[j] = orig + step;
            let up = run(&probe)?;
            probe.value_mut(id).data_mut()[j] = orig - step;
            let down = run(&probe)?;
            probe.value_mut(id).data_mut()[j] = orig;
            analytic.push(full[j]);
            numeric.push((up - down) / (2.0 * step));
        }
        let scale = full.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (1e-3 * scale).max(1e-5 * global) + noise;
        reports.push(compare(id.index(), &analytic, &numeric, &elements, floor));
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        step,
        rtol,
        inputs: reports,
    })
}
