//! Finite-difference verification of tape gradients.
//!
//! Both the analytic pass and the central differences run the model in
//! `f64`, so the comparison measures the adjoint formulas rather than `f32`
//! rounding.

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// A deterministic scalar loss over a parameter store, evaluable at any
/// precision.
pub trait LossFn {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, params: &ParameterStore) -> Result<Var>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            step: 1e-3,
            max_elements: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub numel: usize,
    /// `max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf)`.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Denominator floor: gradients below this are treated as zero.
const REL_FLOOR: f64 = 1e-8;

fn eval_f64<F: LossFn>(f: &F, params: &ParameterStore, perturb: Option<(&str, usize, f64)>) -> Result<f64> {
    let mut g: Graph<f64> = match perturb {
        Some((name, idx, d)) => Graph::with_perturbation(name, idx, d),
        None => Graph::new(),
    };
    let loss = f.loss(&mut g, params)?;
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

pub fn grad_check<F: LossFn>(f: &F, params: &ParameterStore, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let first = eval_f64(f, params, None)?;
    let second = eval_f64(f, params, None)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g: Graph<f64> = Graph::new();
    let loss = f.loss(&mut g, params)?;
    g.backward(loss)?;
    let analytic: std::collections::HashMap<&str, &[f64]> = g.param_grads().collect();

    let mut report = GradCheckReport {
        tolerance: cfg.tolerance,
        params: Vec::new(),
    };
    for (name, t) in params.iter() {
        if !t.requires_grad() {
            continue;
        }
        let n = t.numel();
        let zeros = vec![0.0; n];
        let a = analytic.get(name).copied().unwrap_or(&zeros);
        let stride = match cfg.max_elements {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for idx in (0..n).step_by(stride) {
            let plus = eval_f64(f, params, Some((name, idx, cfg.step)))?;
            let minus = eval_f64(f, params, Some((name, idx, -cfg.step)))?;
            num.push((plus - minus) / (2.0 * cfg.step));
            ana.push(a[idx]);
        }
        let scale = num
            .iter()
            .chain(&ana)
            .map(|v| v.abs())
            .fold(REL_FLOOR, f64::max);
        let max_abs = num
            .iter()
            .zip(&ana)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let err = max_abs / scale;
        report.params.push(ParamCheck {
            name: name.to_string(),
            checked: num.len(),
            numel: n,
            max_rel_error: err,
            passed: err <= cfg.tolerance,
        });
    }
    Ok(report)
}
