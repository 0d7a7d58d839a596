//! Cox proportional hazards model for the terminal event: maximum partial
//! likelihood by Newton-Raphson and the Breslow baseline cumulative hazard.
//!
//! Tied event times use the Breslow approximation. Every routine accepts
//! optional positive subject weights, which the perturbation resampler uses
//! to refit the model; `None` means unit weights.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::data::TrialData;

/// Iterates with `‖η‖∞` above this are treated as diverging (separation).
pub const DIVERGENCE_CAP: f64 = 50.0;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CoxError {
    #[error("no observed terminal events")]
    NoEvents,
    #[error("coefficient dimension {got} does not match covariate dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Cox model not identifiable: {0}")]
    NotIdentifiable(String),
    #[error("Newton-Raphson did not converge in {iterations} iterations (last iterate {last:?})")]
    NonConvergence { iterations: usize, last: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoxOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-8,
        }
    }
}

/// Right-continuous nondecreasing step function starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepFunction {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn from_jumps(times: Vec<f64>, jumps: &[f64]) -> Self {
        assert_eq!(times.len(), jumps.len());
        let values = jumps
            .iter()
            .scan(0.0, |acc, &j| {
                *acc += j;
                Some(*acc)
            })
            .collect();
        Self { times, values }
    }

    /// Value of the most recent jump at or before `t`, or 0 before the first.
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.values[k - 1]
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn jumps(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.values
            .iter()
            .map(|&v| {
                let j = v - prev;
                prev = v;
                j
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoxFit {
    pub eta_hat: Vec<f64>,
    pub baseline: StepFunction,
    pub information: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
}

impl CoxFit {
    /// Model-based standard errors from the inverse observed information.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        let inv = self.information.clone().cholesky()?.inverse();
        Some((0..inv.nrows()).map(|k| inv[(k, k)].sqrt()).collect())
    }
}

/// Risk-set accumulation over subjects sorted by decreasing follow-up time.
struct RiskSets<'a> {
    data: &'a TrialData,
    weights: Option<&'a [f64]>,
    /// subject indices grouped by tied time, latest time first
    groups: Vec<(f64, Vec<usize>)>,
}

struct Evaluation {
    loglik: f64,
    score: DVector<f64>,
    information: DMatrix<f64>,
}

impl<'a> RiskSets<'a> {
    fn new(data: &'a TrialData, weights: Option<&'a [f64]>) -> Self {
        if let Some(w) = weights {
            assert_eq!(w.len(), data.n(), "one weight per subject");
        }
        let subjects = data.subjects();
        let mut order: Vec<usize> = (0..subjects.len()).collect();
        order.sort_by(|&a, &b| {
            subjects[b]
                .followup_time
                .total_cmp(&subjects[a].followup_time)
        });
        let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
        for k in order {
            let t = subjects[k].followup_time;
            match groups.last_mut() {
                Some((gt, members)) if *gt == t => members.push(k),
                _ => groups.push((t, vec![k])),
            }
        }
        Self {
            data,
            weights,
            groups,
        }
    }

    #[inline]
    fn weight(&self, k: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[k])
    }

    fn linear_predictors(&self, eta: &[f64]) -> (Vec<f64>, f64) {
        let r: Vec<f64> = self
            .data
            .subjects()
            .iter()
            .map(|s| dot(&s.covariates, eta))
            .collect();
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (r, max)
    }

    fn evaluate(&self, eta: &[f64], with_derivatives: bool) -> Evaluation {
        let p = eta.len();
        let subjects = self.data.subjects();
        let (r, offset) = self.linear_predictors(eta);
        let mut s0 = Neumaier::default();
        let mut s1 = vec![Neumaier::default(); p];
        let mut s2 = DMatrix::<f64>::zeros(p, p);
        let mut loglik = Neumaier::default();
        let mut score = vec![Neumaier::default(); p];
        let mut info = DMatrix::<f64>::zeros(p, p);
        for (_, members) in &self.groups {
            let mut d = 0.0;
            let mut zsum = DVector::<f64>::zeros(p);
            for &k in members {
                let w = self.weight(k);
                let z = &subjects[k].covariates;
                let e = w * (r[k] - offset).exp();
                s0.add(e);
                if with_derivatives {
                    for a in 0..p {
                        s1[a].add(e * z[a]);
                        for b in 0..=a {
                            s2[(a, b)] += e * z[a] * z[b];
                        }
                    }
                }
                if subjects[k].event {
                    d += w;
                    loglik.add(w * (r[k] - offset));
                    if with_derivatives {
                        for a in 0..p {
                            zsum[a] += w * z[a];
                        }
                    }
                }
            }
            if d > 0.0 {
                let s0v = s0.value();
                loglik.add(-d * s0v.ln());
                if with_derivatives {
                    for a in 0..p {
                        let ma = s1[a].value() / s0v;
                        score[a].add(zsum[a]);
                        score[a].add(-d * ma);
                        for b in 0..=a {
                            let v = d * (s2[(a, b)] / s0v - ma * s1[b].value() / s0v);
                            info[(a, b)] += v;
                        }
                    }
                }
            }
        }
        let loglik = loglik.value();
        let score = DVector::from_iterator(p, score.iter().map(Neumaier::value));
        for a in 0..p {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        Evaluation {
            loglik,
            score,
            information: info,
        }
    }

    fn breslow(&self, eta: &[f64]) -> StepFunction {
        let subjects = self.data.subjects();
        let (r, offset) = self.linear_predictors(eta);
        let mut s0 = 0.0;
        let mut rev_times = Vec::new();
        let mut rev_jumps = Vec::new();
        for (t, members) in &self.groups {
            let mut d = 0.0;
            for &k in members {
                let w = self.weight(k);
                s0 += w * (r[k] - offset).exp();
                if subjects[k].event {
                    d += w;
                }
            }
            if d > 0.0 {
                rev_times.push(*t);
                rev_jumps.push(d * (-offset).exp() / s0);
            }
        }
        rev_times.reverse();
        rev_jumps.reverse();
        StepFunction::from_jumps(rev_times, &rev_jumps)
    }

    fn has_events(&self) -> bool {
        self.data
            .subjects()
            .iter()
            .enumerate()
            .any(|(k, s)| s.event && self.weight(k) > 0.0)
    }

    /// Column index of a covariate that is constant over every event risk set.
    fn constant_column(&self) -> Option<usize> {
        let subjects = self.data.subjects();
        let first_event = subjects
            .iter()
            .filter(|s| s.event)
            .map(|s| s.followup_time)
            .fold(f64::INFINITY, f64::min);
        let at_risk: Vec<&[f64]> = subjects
            .iter()
            .filter(|s| s.followup_time >= first_event)
            .map(|s| s.covariates.as_slice())
            .collect();
        (0..self.data.covariate_dim()).find(|&c| at_risk.iter().all(|z| z[c] == at_risk[0][c]))
    }
}

/// Compensated running sum; risk-set totals over large cohorts otherwise
/// drift by about `n` ulps, which swamps a `1e-8` score tolerance.
#[derive(Debug, Clone, Copy, Default)]
struct Neumaier {
    sum: f64,
    carry: f64,
}

impl Neumaier {
    #[inline]
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

fn separation() -> CoxError {
    CoxError::NotIdentifiable(format!(
        "coefficients diverge past |eta| = {DIVERGENCE_CAP} (separation)"
    ))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dim(data: &TrialData, eta: &[f64]) -> Result<(), CoxError> {
    if eta.len() == data.covariate_dim() {
        Ok(())
    } else {
        Err(CoxError::DimensionMismatch {
            expected: data.covariate_dim(),
            got: eta.len(),
        })
    }
}

/// Log partial likelihood (Breslow ties) at `eta`.
pub fn log_partial_likelihood(data: &TrialData, eta: &[f64]) -> Result<f64, CoxError> {
    check_dim(data, eta)?;
    Ok(RiskSets::new(data, None).evaluate(eta, false).loglik)
}

/// Analytic score and observed information of the log partial likelihood.
pub fn cox_score_and_info(
    data: &TrialData,
    eta: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>), CoxError> {
    check_dim(data, eta)?;
    let ev = RiskSets::new(data, None).evaluate(eta, true);
    Ok((ev.score.iter().copied().collect(), ev.information))
}

/// Breslow estimator of the baseline cumulative hazard at `eta`.
pub fn breslow(data: &TrialData, eta: &[f64]) -> Result<StepFunction, CoxError> {
    breslow_weighted(data, None, eta)
}

pub fn breslow_weighted(
    data: &TrialData,
    weights: Option<&[f64]>,
    eta: &[f64],
) -> Result<StepFunction, CoxError> {
    check_dim(data, eta)?;
    Ok(RiskSets::new(data, weights).breslow(eta))
}

pub fn fit_cox(data: &TrialData, options: &CoxOptions) -> Result<CoxFit, CoxError> {
    fit_cox_weighted(data, None, None, options)
}

/// Weighted maximum partial likelihood fit, optionally warm-started.
pub fn fit_cox_weighted(
    data: &TrialData,
    weights: Option<&[f64]>,
    start: Option<&[f64]>,
    options: &CoxOptions,
) -> Result<CoxFit, CoxError> {
    let p = data.covariate_dim();
    let sets = RiskSets::new(data, weights);
    if !sets.has_events() {
        return Err(CoxError::NoEvents);
    }
    if let Some(c) = sets.constant_column() {
        return Err(CoxError::NotIdentifiable(format!(
            "covariate {c} is constant over all event risk sets"
        )));
    }
    let mut eta = match start {
        Some(s) => {
            check_dim(data, s)?;
            s.to_vec()
        }
        None => vec![0.0; p],
    };
    let mut ev = sets.evaluate(&eta, true);
    for iteration in 0..=options.max_iter {
        let chol = ev.information.clone().cholesky().ok_or_else(|| {
            CoxError::NotIdentifiable("observed information is not positive definite".into())
        })?;
        let step = chol.solve(&ev.score);
        let converged = ev.score.amax() <= options.tol;
        // A vanishing score with a large remaining Newton step means the
        // likelihood keeps rising towards infinity (separation).
        if converged && step.amax() <= options.tol.sqrt() {
            let baseline = sets.breslow(&eta);
            return Ok(CoxFit {
                eta_hat: eta,
                baseline,
                information: ev.information,
                loglik: ev.loglik,
                iterations: iteration,
            });
        }
        if iteration == options.max_iter {
            break;
        }
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = eta
                .iter()
                .zip(step.iter())
                .map(|(e, s)| e + scale * s)
                .collect();
            if candidate.iter().any(|c| c.abs() > DIVERGENCE_CAP) {
                return Err(separation());
            }
            let next = sets.evaluate(&candidate, true);
            // near the optimum the gain drops below rounding of the loglik
            let slack = 64.0 * f64::EPSILON * (1.0 + ev.loglik.abs());
            if next.loglik >= ev.loglik - slack {
                accepted = Some((candidate, next));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((candidate, next)) => {
                eta = candidate;
                ev = next;
            }
            None if converged => return Err(separation()),
            None => break,
        }
    }
    Err(CoxError::NonConvergence {
        iterations: options.max_iter,
        last: eta,
    })
}
