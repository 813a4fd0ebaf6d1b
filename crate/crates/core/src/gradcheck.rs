//! Central finite-difference gradient checking.
//!
//! The analytic gradient is taken at the working precision `T`, while the
//! finite-difference oracle always evaluates the objective in `f64` at the
//! same (exactly up-cast) inputs. That keeps the oracle free of `f32`
//! cancellation noise and independent of any backward code.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::RngState;
use crate::tensor::{Float, Tensor};

/// A scalar function of a list of tensors, evaluable at any precision.
pub trait Objective {
    fn eval<T: Float>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor in `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many elements per input (chosen with `seed`).
    pub max_elems_per_input: Option<usize>,
    /// Inputs (by position) to leave unchecked, e.g. integer-like constants.
    pub skip_inputs: Vec<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            floor: 1e-3,
            max_elems_per_input: None,
            skip_inputs: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

fn eval_f64<O: Objective>(obj: &O, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = obj.eval(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Analytic gradient of `obj` at `inputs` in precision `T`.
pub fn analytic_gradients<T: Float, O: Objective>(
    obj: &O,
    inputs: &[Tensor<T>],
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = obj.eval(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect())
}

/// Central-difference derivative of `obj` w.r.t. one element, in `f64`.
pub fn numeric_derivative<O: Objective>(
    obj: &O,
    inputs: &[Tensor<f64>],
    input: usize,
    elem: usize,
    step: f64,
) -> Result<f64> {
    let mut plus = inputs.to_vec();
    plus[input].data_mut()[elem] += step;
    let mut minus = inputs.to_vec();
    minus[input].data_mut()[elem] -= step;
    Ok((eval_f64(obj, &plus)? - eval_f64(obj, &minus)?) / (2.0 * step))
}

pub fn check_gradients<T: Float, O: Objective>(
    obj: &O,
    inputs: &[Tensor<T>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(obj, inputs)?;
    let base: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast::<f64>()).collect();
    let mut rng = RngState::new(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (i, t) in base.iter().enumerate() {
        if cfg.skip_inputs.contains(&i) {
            continue;
        }
        let mut elems: Vec<usize> = (0..t.numel()).collect();
        if let Some(k) = cfg.max_elems_per_input {
            rng.shuffle(&mut elems);
            elems.truncate(k);
        }
        for e in elems {
            let a = analytic[i][e];
            let n = numeric_derivative(obj, &base, i, e, cfg.step)?;
            let err = (a - n).abs() / a.abs().max(n.abs()).max(cfg.floor);
            report.checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, e, a, n));
            }
        }
    }
    Ok(report)
}

/// `Σ w ⊙ out` with fixed pseudo-random weights in [-1, 1]; turns any
/// tensor-valued op into a scalar objective with a non-trivial gradient.
pub fn weighted_sum<T: Float>(g: &mut Graph<T>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = RngState::new(seed ^ 0xA5A5).uniform_tensor::<T>(&shape, -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}
