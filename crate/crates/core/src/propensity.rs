//! Logit propensity model fitted by Newton-Raphson (IRLS).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Scores are clamped to `[SEPARATION_CLAMP, 1 - SEPARATION_CLAMP]` when the
/// fit stops on perfect separation.
pub const SEPARATION_CLAMP: f64 = 1e-6;
const SCORE_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the max absolute coefficient change.
    pub tolerance: f64,
    /// L2 penalty on the slope coefficients (the intercept is never
    /// penalized). Zero gives the plain maximum-likelihood fit.
    pub ridge: f64,
    /// Any |coefficient| above this is treated as perfect separation.
    pub separation_bound: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-8,
            ridge: 0.0,
            separation_bound: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    #[serde(skip)]
    pub scores: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    #[serde(default)]
    pub separated: bool,
}

impl PropensityModel {
    /// Propensity score of a covariate vector.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.coefficients.len() {
            return Err(Error::DimensionMismatch {
                expected: self.coefficients.len(),
                got: x.len(),
            });
        }
        Ok(self.clamp(logistic(self.linear_predictor(x))))
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }

    fn clamp(&self, p: f64) -> f64 {
        let floor = if self.separated {
            SEPARATION_CLAMP
        } else {
            SCORE_FLOOR
        };
        p.clamp(floor, 1.0 - floor)
    }

    /// `[intercept, coefficients...]`
    pub fn parameters(&self) -> Vec<f64> {
        std::iter::once(self.intercept)
            .chain(self.coefficients.iter().copied())
            .collect()
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^eta) without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn eta_at(d: &Dataset, i: usize, params: &[f64]) -> f64 {
    params[0]
        + d.row(i)
            .iter()
            .zip(&params[1..])
            .map(|(x, b)| x * b)
            .sum::<f64>()
}

/// Bernoulli log-likelihood of the treatment vector at `[intercept, coefs...]`.
pub fn log_likelihood(d: &Dataset, params: &[f64]) -> f64 {
    (0..d.len())
        .map(|i| {
            let eta = eta_at(d, i, params);
            let z = if d.is_treated(i) { eta } else { 0.0 };
            z - softplus(eta)
        })
        .sum()
}

/// Analytic gradient of [`log_likelihood`].
pub fn gradient(d: &Dataset, params: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; params.len()];
    for i in 0..d.len() {
        let r = f64::from(u8::from(d.is_treated(i))) - logistic(eta_at(d, i, params));
        g[0] += r;
        for (gj, x) in g[1..].iter_mut().zip(d.row(i)) {
            *gj += r * x;
        }
    }
    g
}

fn penalized_objective(d: &Dataset, params: &[f64], ridge: f64) -> f64 {
    log_likelihood(d, params) - 0.5 * ridge * params[1..].iter().map(|b| b * b).sum::<f64>()
}

/// Maximum-likelihood logit fit of treatment on covariates.
pub fn fit_propensity(d: &Dataset) -> Result<PropensityModel> {
    fit_propensity_with(d, &FitOptions::default())
}

pub fn fit_propensity_with(d: &Dataset, opts: &FitOptions) -> Result<PropensityModel> {
    d.require_both_groups()?;
    let n = d.len();
    let k = d.n_covariates() + 1;

    let prevalence = d.n_treated() as f64 / n as f64;
    let mut params = vec![0.0; k];
    params[0] = (prevalence / (1.0 - prevalence)).ln();

    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;
    let mut objective = penalized_objective(d, &params, opts.ridge);

    while iterations < opts.max_iterations {
        iterations += 1;
        let mut hess = DMatrix::<f64>::zeros(k, k);
        let mut grad = DVector::<f64>::zeros(k);
        let mut xi = vec![1.0; k];
        for i in 0..n {
            xi[1..].copy_from_slice(d.row(i));
            let p = logistic(eta_at(d, i, &params));
            let w = p * (1.0 - p);
            let r = f64::from(u8::from(d.is_treated(i))) - p;
            for a in 0..k {
                grad[a] += r * xi[a];
                let wa = w * xi[a];
                for b in a..k {
                    hess[(a, b)] += wa * xi[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        for j in 1..k {
            grad[j] -= opts.ridge * params[j];
            hess[(j, j)] += opts.ridge;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            // Rank-deficient information (constant or collinear columns):
            // minimum-norm Newton step.
            None => match hess.svd(true, true).solve(&grad, 1e-12) {
                Ok(s) => s,
                Err(_) => break,
            },
        };

        // Step halving keeps the objective monotone.
        let mut scale = 1.0;
        let mut candidate: Vec<f64>;
        loop {
            candidate = params
                .iter()
                .zip(step.iter())
                .map(|(b, s)| b + scale * s)
                .collect();
            let obj = penalized_objective(d, &candidate, opts.ridge);
            if obj >= objective - 1e-12 * objective.abs().max(1.0) || scale < 1e-10 {
                objective = obj;
                break;
            }
            scale *= 0.5;
        }
        let max_change = params
            .iter()
            .zip(&candidate)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        params = candidate;

        if params[1..].iter().any(|b| b.abs() > opts.separation_bound)
            || params[0].abs() > opts.separation_bound + 20.0
        {
            separated = true;
            break;
        }
        if max_change <= opts.tolerance {
            converged = true;
            break;
        }
    }

    let mut model = PropensityModel {
        intercept: params[0],
        coefficients: params[1..].to_vec(),
        scores: Vec::new(),
        converged: converged && !separated,
        iterations,
        separated,
    };
    model.scores = (0..n)
        .map(|i| model.clamp(logistic(model.linear_predictor(d.row(i)))))
        .collect();
    Ok(model)
}
