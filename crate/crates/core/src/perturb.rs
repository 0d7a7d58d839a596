//! Perturbation resampling: the whole pipeline (weighted Cox fit, weighted
//! Breslow, risk-score bands, weighted estimating equation) is refit under
//! i.i.d. positive unit-mean subject weights, and the spread of the refits
//! estimates the sampling variability of the point estimates.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::TrialData;
use crate::seed::{rng_for, SeedTag};
use crate::sjm::{fit_sjm, fit_sjm_with, Assembly, DesignSpec, DesignVariant, SjmError, SjmFit, SjmOptions};
use crate::spline::{effect_curve, slope_curve, EffectCurve, SplineError};

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.10;
const Z975: f64 = 1.96;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PerturbError {
    #[error("perturbation config: {0}")]
    Config(String),
    #[error("point estimate failed: {0}")]
    Fit(#[from] SjmError),
    #[error("{failed} of {total} perturbation replicates failed (limit 10%); first failure: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error(transparent)]
    Spline(#[from] SplineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WeightLaw {
    /// Standard exponential: mean 1, variance 1.
    StandardExponential,
    /// Every weight equal to 1. Reproduces the point estimate; for testing.
    Unit,
}

impl WeightLaw {
    fn sample<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            WeightLaw::StandardExponential => Exp1.sample(rng),
            WeightLaw::Unit => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbConfig {
    pub replicates: usize,
    pub weight_law: WeightLaw,
    pub seed: u64,
}

impl PerturbConfig {
    pub const DEFAULT_REPLICATES: usize = 500;

    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            weight_law: WeightLaw::StandardExponential,
            seed,
        }
    }

    fn validate(&self) -> Result<(), PerturbError> {
        if self.replicates < 2 {
            return Err(PerturbError::Config(format!(
                "need at least 2 replicates, got {}",
                self.replicates
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbResult {
    pub labels: Vec<String>,
    pub eta_hat: Vec<f64>,
    pub beta_hat: Vec<f64>,
    /// Successful replicates only, in replicate order.
    #[serde(skip)]
    pub eta_star: Vec<Vec<f64>>,
    #[serde(skip)]
    pub beta_star: Vec<Vec<f64>>,
    pub eta_se: Vec<f64>,
    pub beta_se: Vec<f64>,
    pub eta_ci95: Vec<[f64; 2]>,
    pub beta_ci95: Vec<[f64; 2]>,
    #[serde(rename = "B_effective")]
    pub b_effective: usize,
    pub failures: usize,
}

/// Subject weights of replicate `b`.
pub fn replicate_weights(config: &PerturbConfig, b: usize, n: usize) -> Vec<f64> {
    let mut rng = rng_for(config.seed, SeedTag::Perturbation, b as u64);
    (0..n).map(|_| config.weight_law.sample(&mut rng)).collect()
}

/// Resampling around a point estimate that has already been computed.
pub fn perturb_around(
    data: &TrialData,
    fit: &SjmFit,
    config: &PerturbConfig,
    options: &SjmOptions,
) -> Result<PerturbResult, PerturbError> {
    config.validate()?;
    let n = data.n();
    let outcomes: Vec<Result<(Vec<f64>, Vec<f64>), SjmError>> = (0..config.replicates)
        .into_par_iter()
        .map(|b| {
            let w = replicate_weights(config, b, n);
            let assembly = Assembly {
                subject_weights: Some(&w),
                visit_weight: None,
            };
            fit_sjm_with(data, &fit.design, options, Some(&fit.cox.eta_hat), assembly)
                .map(|f| (f.cox.eta_hat, f.beta_hat))
        })
        .collect();
    let mut eta_star = Vec::with_capacity(outcomes.len());
    let mut beta_star = Vec::with_capacity(outcomes.len());
    let mut first_error = None;
    for outcome in outcomes {
        match outcome {
            Ok((e, b)) => {
                eta_star.push(e);
                beta_star.push(b);
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let failures = config.replicates - beta_star.len();
    if failures as f64 > MAX_FAILURE_RATE * config.replicates as f64 || beta_star.len() < 2 {
        return Err(PerturbError::TooManyFailures {
            failed: failures,
            total: config.replicates,
            first: first_error.map_or_else(String::new, |e| e.to_string()),
        });
    }
    let eta_se = column_sd(&eta_star);
    let beta_se = column_sd(&beta_star);
    Ok(PerturbResult {
        labels: fit.labels.clone(),
        eta_ci95: normal_ci(&fit.cox.eta_hat, &eta_se),
        beta_ci95: normal_ci(&fit.beta_hat, &beta_se),
        eta_hat: fit.cox.eta_hat.clone(),
        beta_hat: fit.beta_hat.clone(),
        eta_star,
        beta_star,
        eta_se,
        beta_se,
        b_effective: config.replicates - failures,
        failures,
    })
}

pub fn perturb_fit(
    data: &TrialData,
    spec: &DesignSpec,
    config: &PerturbConfig,
    options: &SjmOptions,
) -> Result<(SjmFit, PerturbResult), PerturbError> {
    config.validate()?;
    let fit = fit_sjm(data, spec, options)?;
    let result = perturb_around(data, &fit, config, options)?;
    Ok((fit, result))
}

/// Effect curve with pointwise perturbation standard errors of `g(t)/t`.
pub fn curve_bands(
    data: &TrialData,
    spec: &DesignSpec,
    grid: &[f64],
    config: &PerturbConfig,
    options: &SjmOptions,
) -> Result<(SjmFit, PerturbResult, EffectCurve), PerturbError> {
    crate::spline::check_grid(grid)?;
    let (fit, result) = perturb_fit(data, spec, config, options)?;
    let curve = bands_from(&fit, &result, grid)?;
    Ok((fit, result, curve))
}

/// Maps replicate coefficients through the basis to pointwise slope SEs.
pub fn bands_from(
    fit: &SjmFit,
    result: &PerturbResult,
    grid: &[f64],
) -> Result<EffectCurve, PerturbError> {
    let basis = match &fit.design.variant {
        DesignVariant::Spline(b) => b,
        _ => return Err(SplineError::NotSplineDesign.into()),
    };
    let curve = effect_curve(fit, grid)?;
    let k = basis.len();
    let replicate_curves = result
        .beta_star
        .iter()
        .map(|b| slope_curve(basis, &b[1..1 + k], grid))
        .collect::<Result<Vec<_>, _>>()?;
    let se = column_sd(&replicate_curves);
    Ok(curve.with_se(se)?)
}

/// Sample standard deviation (denominator `m - 1`) of each column.
pub fn column_sd(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.len();
    if m == 0 {
        return Vec::new();
    }
    let p = rows[0].len();
    (0..p)
        .map(|c| {
            // shifted by the first row so identical replicates give exactly 0
            let origin = rows[0][c];
            let shift = rows.iter().map(|r| r[c] - origin).sum::<f64>() / m as f64;
            let ss: f64 = rows.iter().map(|r| (r[c] - origin - shift).powi(2)).sum();
            if m > 1 {
                (ss / (m - 1) as f64).sqrt()
            } else {
                0.0
            }
        })
        .collect()
}

fn normal_ci(est: &[f64], se: &[f64]) -> Vec<[f64; 2]> {
    est.iter()
        .zip(se)
        .map(|(e, s)| [e - Z975 * s, e + Z975 * s])
        .collect()
}
