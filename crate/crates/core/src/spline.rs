//! B-spline time basis for the nonlinear treatment effect and the derived
//! effect curves `delta_y(t) = beta0 + g(t)` and `delta_yslope(t) = g(t) / t`.
//!
//! The basis is a clamped B-spline basis on `[0, tau]` with the first
//! function removed. Because the knot vector is clamped at 0, every
//! remaining function vanishes there, which pins `g(0) = 0` and keeps the
//! treatment main effect identifiable.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::data::TrialData;
use crate::sjm::{DesignVariant, SjmFit};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SplineError {
    #[error("spline configuration: {0}")]
    Config(String),
    #[error("t = {t} lies outside the basis range [0, {upper}]")]
    Extrapolation { t: f64, upper: f64 },
    #[error("effect curve grid must be strictly positive, found {0}")]
    Domain(f64),
    #[error("fit does not use a spline design")]
    NotSplineDesign,
    #[error("pointwise se length {got} does not match grid length {expected}")]
    SeLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplineBasis {
    degree: usize,
    interior_knots: Vec<f64>,
    upper: f64,
    #[serde(skip)]
    knots: Vec<f64>,
    #[serde(skip)]
    at_zero: Vec<f64>,
}

impl SplineBasis {
    pub const DEFAULT_DEGREE: usize = 3;
    pub const DEFAULT_INTERIOR_KNOTS: usize = 3;

    pub fn new(degree: usize, interior_knots: Vec<f64>, upper: f64) -> Result<Self, SplineError> {
        if degree == 0 {
            return Err(SplineError::Config(
                "degree must be at least 1 for a continuous basis".into(),
            ));
        }
        if !(upper > 0.0) || !upper.is_finite() {
            return Err(SplineError::Config(format!(
                "upper boundary must be positive, got {upper}"
            )));
        }
        let mut prev = 0.0;
        for &k in &interior_knots {
            if !(k > prev) || !(k < upper) {
                return Err(SplineError::Config(format!(
                    "interior knots must be strictly increasing inside (0, {upper}): {interior_knots:?}"
                )));
            }
            prev = k;
        }
        let mut knots = vec![0.0; degree + 1];
        knots.extend_from_slice(&interior_knots);
        knots.extend(std::iter::repeat_n(upper, degree + 1));
        let mut basis = Self {
            degree,
            interior_knots,
            upper,
            knots,
            at_zero: Vec::new(),
        };
        let full = basis.full_basis(0.0);
        basis.at_zero = full[1..].to_vec();
        Ok(basis)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    /// Number of basis functions after the anchoring constraint.
    pub fn len(&self) -> usize {
        self.interior_knots.len() + self.degree
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All `interior + degree + 1` clamped B-splines at `t` in `[0, upper]`.
    fn full_basis(&self, t: f64) -> Vec<f64> {
        let d = self.degree;
        let m = self.interior_knots.len() + d + 1;
        let u = &self.knots;
        // span index with u[span] <= t < u[span + 1]; the right end uses the last span
        let span = if t >= self.upper {
            m - 1
        } else {
            u.partition_point(|&k| k <= t) - 1
        };
        // Cox-de Boor triangle for the d + 1 nonzero functions
        let mut n = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        n[0] = 1.0;
        for j in 1..=d {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        let mut out = vec![0.0; m];
        out[span - d..=span].copy_from_slice(&n);
        out
    }

    /// Anchored basis `phi(t)`; every entry is 0 at `t = 0`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>, SplineError> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<(), SplineError> {
        if !(0.0..=self.upper).contains(&t) {
            return Err(SplineError::Extrapolation {
                t,
                upper: self.upper,
            });
        }
        let full = self.full_basis(t);
        for ((o, f), z) in out.iter_mut().zip(&full[1..]).zip(&self.at_zero) {
            *o = f - z;
        }
        Ok(())
    }
}

/// Basis on `[0, tau]` with interior knots at empirical quantiles of the
/// pooled visit times that fall strictly inside `(0, tau)`.
///
/// When heavy ties (e.g. scheduled integer visits) make two quantiles
/// coincide, the quantiles are taken over the distinct visit times instead.
pub fn make_basis(
    data: &TrialData,
    degree: usize,
    n_interior_knots: usize,
) -> Result<SplineBasis, SplineError> {
    let tau = data.tau();
    let mut pooled: Vec<f64> = data
        .visits()
        .iter()
        .flatten()
        .map(|v| v.time)
        .filter(|&t| t > 0.0 && t < tau)
        .collect();
    pooled.sort_by(f64::total_cmp);
    let mut distinct = pooled.clone();
    distinct.dedup();
    if distinct.len() < n_interior_knots {
        return Err(SplineError::Config(format!(
            "{} distinct visit times inside (0, tau) cannot hold {n_interior_knots} knots",
            distinct.len()
        )));
    }
    let mut knots = quantile_knots(&pooled, n_interior_knots);
    if knots.windows(2).any(|w| w[0] >= w[1]) {
        knots = quantile_knots(&distinct, n_interior_knots);
    }
    SplineBasis::new(degree, knots, tau)
}

/// Type-7 (linear interpolation) quantiles at `k / (m + 1)`, `k = 1..=m`.
fn quantile_knots(sorted: &[f64], m: usize) -> Vec<f64> {
    let n = sorted.len();
    (1..=m)
        .map(|k| {
            let h = (n - 1) as f64 * k as f64 / (m + 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        })
        .collect()
}

/// Treatment effect on the outcome and on its average slope over `(0, t]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectCurve {
    pub grid: Vec<f64>,
    pub delta_y: Vec<f64>,
    pub delta_yslope: Vec<f64>,
    pub pointwise_se: Vec<f64>,
}

impl EffectCurve {
    pub fn with_se(mut self, se: Vec<f64>) -> Result<Self, SplineError> {
        if se.len() != self.grid.len() {
            return Err(SplineError::SeLength {
                expected: self.grid.len(),
                got: se.len(),
            });
        }
        self.pointwise_se = se;
        Ok(self)
    }

    /// `t,delta_y,delta_yslope,se_slope,lo95,hi95`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "delta_y", "delta_yslope", "se_slope", "lo95", "hi95"])?;
        for k in 0..self.grid.len() {
            let slope = self.delta_yslope[k];
            let se = self.pointwise_se[k];
            w.write_record([
                self.grid[k].to_string(),
                self.delta_y[k].to_string(),
                slope.to_string(),
                se.to_string(),
                (slope - 1.96 * se).to_string(),
                (slope + 1.96 * se).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn check_grid(grid: &[f64]) -> Result<(), SplineError> {
    match grid.iter().find(|&&t| !(t > 0.0)) {
        Some(&t) => Err(SplineError::Domain(t)),
        None => Ok(()),
    }
}

/// `g(t) / t` for every grid point given the spline block of coefficients.
pub fn slope_curve(
    basis: &SplineBasis,
    spline_coefficients: &[f64],
    grid: &[f64],
) -> Result<Vec<f64>, SplineError> {
    check_grid(grid)?;
    grid.iter()
        .map(|&t| {
            let phi = basis.eval(t)?;
            Ok(dot(&phi, spline_coefficients) / t)
        })
        .collect()
}

/// Point estimates of the effect curves; `pointwise_se` starts at zero and
/// is filled in by the perturbation resampler.
pub fn effect_curve(fit: &SjmFit, grid: &[f64]) -> Result<EffectCurve, SplineError> {
    let basis = match &fit.design.variant {
        DesignVariant::Spline(b) => b,
        _ => return Err(SplineError::NotSplineDesign),
    };
    check_grid(grid)?;
    let beta0 = fit.beta_hat[0];
    let coef = &fit.beta_hat[1..1 + basis.len()];
    let mut delta_y = Vec::with_capacity(grid.len());
    let mut delta_yslope = Vec::with_capacity(grid.len());
    for &t in grid {
        let g = dot(&basis.eval(t)?, coef);
        delta_y.push(beta0 + g);
        delta_yslope.push(g / t);
    }
    Ok(EffectCurve {
        grid: grid.to_vec(),
        delta_y,
        delta_yslope,
        pointwise_se: vec![0.0; grid.len()],
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
