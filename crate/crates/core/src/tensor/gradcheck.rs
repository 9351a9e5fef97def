//! Central finite-difference verification of hand-written backward passes.

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Rng;

/// A scalar loss over a parameter store, with its analytic gradient.
pub trait Objective {
    fn loss(&self, params: &ParameterStore<f64>) -> Result<f64>;

    /// Returns the loss and accumulates `∂loss/∂θ` into the gradient slots.
    fn loss_and_grad(&self, params: &mut ParameterStore<f64>) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic gradients with `(f(θ+h) − f(θ−h)) / 2h` per coordinate.
pub fn grad_check(
    objective: &impl Objective,
    params: &mut ParameterStore<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    params.zero_grad();
    let base = objective.loss_and_grad(params)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {base}")));
    }
    let mut rng = Rng::new(opts.seed);
    let ids: Vec<_> = params.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.value(id).len();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(k) = opts.max_coords.filter(|&k| k < n) {
            rng.shuffle(&mut coords);
            coords.truncate(k);
            coords.sort_unstable();
        }
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + opts.step;
            let plus = objective.loss(params)?;
            params.value_mut(id).data_mut()[i] = orig - opts.step;
            let minus = objective.loss(params)?;
            params.value_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite perturbed loss at {}[{i}]",
                    params.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = params.grad(id).data()[i];
            worst = worst.max(relative_error(analytic, numeric, opts.floor));
        }
        report.push(ParamCheck {
            name: params.name(id).to_string(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        params: report,
    })
}
