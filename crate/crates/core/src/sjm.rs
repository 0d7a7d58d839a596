//! Closed-form estimating-equation estimator of the treatment effect on a
//! longitudinal outcome whose collection is stopped by a terminal event.
//!
//! Given a fitted Cox model, every subject `j` carries a terminal score
//! `s_j = Λ0(T_j) exp(η'Z_j)`. At visit time `t`, subject `i` is matched to
//! the band of subjects
//!
//! ```text
//! φ_j(t, Z_i) = 1{ s_j > Λ0(t) e^{η'Z_i} >= Λ0(t) e^{η'Z_j} }
//! ```
//!
//! and its design vector and outcome are centered by the band averages. The
//! resulting estimating function is linear in β, `U(β) = rhs - lhs β`, so the
//! estimate is a single dense solve.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cox::{fit_cox_weighted, CoxError, CoxFit, CoxOptions, StepFunction};
use crate::data::{Subject, TrialData};
use crate::spline::{make_basis, SplineBasis, SplineError};

/// Solves with a larger condition number are reported as not identifiable.
pub const MAX_CONDITION: f64 = 1e10;
/// Relative bound on `‖U(β̂)‖∞` accepted after the solve.
pub const RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SjmError {
    #[error(transparent)]
    Cox(#[from] CoxError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("design: {0}")]
    Design(String),
    #[error("estimating equation not identifiable: {0}")]
    NotIdentifiable(String),
    #[error("closed-form solve left relative residual {0:e}")]
    Residual(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DesignVariant {
    Linear,
    ChangePoint { t_star: f64 },
    Spline(SplineBasis),
}

/// Recipe for the time-varying regressor `Z̃(t) = (A, A·f(t), Z_{-1})`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignSpec {
    pub variant: DesignVariant,
    /// Number of baseline covariates including the treatment indicator.
    pub covariate_dim: usize,
}

impl DesignSpec {
    pub fn linear(covariate_dim: usize) -> Self {
        Self {
            variant: DesignVariant::Linear,
            covariate_dim,
        }
    }

    pub fn change_point(t_star: f64, tau: f64, covariate_dim: usize) -> Result<Self, SjmError> {
        if !(t_star > 0.0 && t_star < tau) {
            return Err(SjmError::Design(format!(
                "change point t* = {t_star} must lie in (0, tau = {tau})"
            )));
        }
        Ok(Self {
            variant: DesignVariant::ChangePoint { t_star },
            covariate_dim,
        })
    }

    pub fn spline(basis: SplineBasis, covariate_dim: usize) -> Self {
        Self {
            variant: DesignVariant::Spline(basis),
            covariate_dim,
        }
    }

    /// Width of the treatment-by-time block `f(t)`.
    pub fn time_width(&self) -> usize {
        match &self.variant {
            DesignVariant::Linear => 1,
            DesignVariant::ChangePoint { .. } => 2,
            DesignVariant::Spline(b) => b.len(),
        }
    }

    pub fn dim(&self) -> usize {
        1 + self.time_width() + self.covariate_dim - 1
    }

    pub fn labels(&self) -> Vec<String> {
        let mut labels = vec!["A".to_string()];
        match &self.variant {
            DesignVariant::Linear => labels.push("A*t".into()),
            DesignVariant::ChangePoint { .. } => {
                labels.push("A*t".into());
                labels.push("A*(t-t*)+".into());
            }
            DesignVariant::Spline(b) => {
                labels.extend((1..=b.len()).map(|k| format!("A*phi{k}(t)")));
            }
        }
        labels.extend((1..self.covariate_dim).map(|k| format!("z{k}")));
        labels
    }

    /// `f(t)`, the time features multiplied by treatment.
    pub fn time_features(&self, t: f64) -> Result<Vec<f64>, SjmError> {
        Ok(match &self.variant {
            DesignVariant::Linear => vec![t],
            DesignVariant::ChangePoint { t_star } => vec![t, (t - t_star).max(0.0)],
            DesignVariant::Spline(b) => b.eval(t)?,
        })
    }

    pub fn check_data(&self, data: &TrialData) -> Result<(), SjmError> {
        if data.covariate_dim() != self.covariate_dim {
            return Err(SjmError::Design(format!(
                "design expects {} covariates, data has {}",
                self.covariate_dim,
                data.covariate_dim()
            )));
        }
        if let DesignVariant::Spline(b) = &self.variant {
            let last = data.distinct_visit_times().last().copied().unwrap_or(0.0);
            if last > b.upper() {
                return Err(SplineError::Extrapolation {
                    t: last,
                    upper: b.upper(),
                }
                .into());
            }
        }
        Ok(())
    }
}

/// Writes `Z̃(t)` for one subject given precomputed `f(t)`.
#[inline]
fn fill_design(subject: &Subject, features: &[f64], out: &mut [f64]) {
    let a = subject.treatment();
    out[0] = a;
    for (o, f) in out[1..=features.len()].iter_mut().zip(features) {
        *o = a * f;
    }
    out[1 + features.len()..].copy_from_slice(subject.extra_covariates());
}

/// Data-independent description of a design; spline knots are placed once
/// the dataset is known.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DesignRecipe {
    Linear,
    ChangePoint { t_star: f64 },
    /// Interior knots at quantiles of the pooled visit times.
    Spline { degree: usize, interior_knots: usize },
    /// Interior knots given explicitly.
    SplineAt { degree: usize, knots: Vec<f64> },
}

impl DesignRecipe {
    pub fn build(&self, data: &TrialData) -> Result<DesignSpec, SjmError> {
        let dim = data.covariate_dim();
        match *self {
            DesignRecipe::Linear => Ok(DesignSpec::linear(dim)),
            DesignRecipe::ChangePoint { t_star } => DesignSpec::change_point(t_star, data.tau(), dim),
            DesignRecipe::SplineAt { degree, ref knots } => Ok(DesignSpec::spline(
                SplineBasis::new(degree, knots.clone(), data.tau())?,
                dim,
            )),
            DesignRecipe::Spline {
                degree,
                interior_knots,
            } => Ok(DesignSpec::spline(
                make_basis(data, degree, interior_knots)?,
                dim,
            )),
        }
    }
}

/// `Z̃(t)` for one subject.
pub fn build_design(spec: &DesignSpec, subject: &Subject, t: f64) -> Result<Vec<f64>, SjmError> {
    let features = spec.time_features(t)?;
    let mut out = vec![0.0; spec.dim()];
    fill_design(subject, &features, &mut out);
    Ok(out)
}

/// Cumulative-hazard-scale risk scores derived from a Cox fit.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskScoreIndex {
    pub baseline: StepFunction,
    pub linear_predictor: Vec<f64>,
    /// `exp(η'Z_j)`
    pub relative_risk: Vec<f64>,
    /// `Λ0(T_j) exp(η'Z_j)`
    pub terminal_score: Vec<f64>,
}

impl RiskScoreIndex {
    pub fn new(data: &TrialData, eta: &[f64], baseline: StepFunction) -> Self {
        let linear_predictor: Vec<f64> = data
            .subjects()
            .iter()
            .map(|s| s.covariates.iter().zip(eta).map(|(z, e)| z * e).sum())
            .collect();
        let relative_risk: Vec<f64> = linear_predictor.iter().map(|r| r.exp()).collect();
        let terminal_score = data
            .subjects()
            .iter()
            .zip(&relative_risk)
            .map(|(s, rr)| baseline.eval(s.followup_time) * rr)
            .collect();
        Self {
            baseline,
            linear_predictor,
            relative_risk,
            terminal_score,
        }
    }

    pub fn from_fit(data: &TrialData, cox: &CoxFit) -> Self {
        Self::new(data, &cox.eta_hat, cox.baseline.clone())
    }

    /// Band membership of subject `j` for subject `i` at time `t`.
    pub fn phi(&self, j: usize, t: f64, i: usize) -> bool {
        let lam = self.baseline.eval(t);
        phi_at(lam, self.terminal_score[j], self.relative_risk[j], self.relative_risk[i])
    }
}

#[inline]
fn phi_at(lam: f64, score_j: f64, rr_j: f64, rr_i: f64) -> bool {
    let level = lam * rr_i;
    score_j > level && level >= lam * rr_j
}

pub fn phi_weight(index: &RiskScoreIndex, j: usize, t: f64, i: usize) -> u8 {
    u8::from(index.phi(j, t, i))
}

/// Band averages for subject `i` at a visit time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredTerms {
    /// `Σ_l φ_l(t, Z_i)`
    pub denom: f64,
    pub z_bar: Vec<f64>,
    /// `Σ_j φ_j Y_j(t) dN_j(t) / denom` over subjects visiting at `t`
    pub dy_bar: f64,
    /// `Σ_j φ_j Z̃_j(t) dN_j(t) / denom` over subjects visiting at `t`
    pub dg_bar: Vec<f64>,
}

/// Direct O(n) evaluation of the band averages; the assembler computes the
/// same quantities with a sweep over all subjects at once.
pub fn centered_terms(
    data: &TrialData,
    index: &RiskScoreIndex,
    spec: &DesignSpec,
    i: usize,
    t: f64,
) -> Result<CenteredTerms, SjmError> {
    let q = spec.dim();
    let features = spec.time_features(t)?;
    let lam = index.baseline.eval(t);
    let mut z = vec![0.0; q];
    let mut denom = 0.0;
    let mut z_sum = vec![0.0; q];
    let mut y_sum = 0.0;
    let mut g_sum = vec![0.0; q];
    for (l, s) in data.subjects().iter().enumerate() {
        if !phi_at(
            lam,
            index.terminal_score[l],
            index.relative_risk[l],
            index.relative_risk[i],
        ) {
            continue;
        }
        fill_design(s, &features, &mut z);
        denom += 1.0;
        add(&mut z_sum, &z, 1.0);
        if let Some(v) = data.visits()[l].iter().find(|v| v.time == t) {
            y_sum += v.value;
            add(&mut g_sum, &z, 1.0);
        }
    }
    if denom == 0.0 {
        return Ok(CenteredTerms {
            denom,
            z_bar: vec![0.0; q],
            dy_bar: 0.0,
            dg_bar: vec![0.0; q],
        });
    }
    Ok(CenteredTerms {
        denom,
        z_bar: z_sum.iter().map(|v| v / denom).collect(),
        dy_bar: y_sum / denom,
        dg_bar: g_sum.iter().map(|v| v / denom).collect(),
    })
}

#[inline]
fn add(acc: &mut [f64], v: &[f64], scale: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

/// Extra multiplicative weight on subject `i`'s summand at time `t`.
pub type VisitWeight<'a> = &'a (dyn Fn(usize, f64) -> f64 + Sync);

/// Optional weights applied while assembling the estimating equation.
#[derive(Clone, Copy, Default)]
pub struct Assembly<'a> {
    /// Per-subject multipliers (perturbation resampling). Each subject's
    /// own summand and its contributions to every band average are scaled.
    pub subject_weights: Option<&'a [f64]>,
    /// Per-(subject, time) multiplier on the outer summand.
    pub visit_weight: Option<VisitWeight<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub lhs: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl NormalEquations {
    /// `U(β) = rhs - lhs β`
    pub fn estimating_function(&self, beta: &[f64]) -> Vec<f64> {
        let b = DVector::from_column_slice(beta);
        (&self.rhs - &self.lhs * b).iter().copied().collect()
    }
}

/// Fenwick tree of fixed-width vectors, prefix queries only.
struct Fenwick {
    width: usize,
    data: Vec<f64>,
}

impl Fenwick {
    fn new(len: usize, width: usize) -> Self {
        Self {
            width,
            data: vec![0.0; (len + 1) * width],
        }
    }

    fn add(&mut self, pos: usize, v: &[f64]) {
        let n = self.data.len() / self.width - 1;
        let mut k = pos + 1;
        while k <= n {
            let node = &mut self.data[k * self.width..(k + 1) * self.width];
            for (a, x) in node.iter_mut().zip(v) {
                *a += x;
            }
            k += k & k.wrapping_neg();
        }
    }

    /// Sum over positions `0..len`.
    fn prefix(&self, len: usize, out: &mut [f64]) {
        out.fill(0.0);
        let mut k = len;
        while k > 0 {
            let node = &self.data[k * self.width..(k + 1) * self.width];
            for (a, x) in out.iter_mut().zip(node) {
                *a += x;
            }
            k &= k - 1;
        }
    }
}

/// Builds `lhs` and `rhs` such that `U(β) = rhs - lhs β`.
///
/// Integration runs over every distinct visit time `t <= tau`; subject `i`
/// contributes while `T_i > t`. A summand whose band is empty is dropped.
pub fn assemble_normal_equations(
    data: &TrialData,
    index: &RiskScoreIndex,
    spec: &DesignSpec,
    assembly: &Assembly<'_>,
) -> Result<NormalEquations, SjmError> {
    spec.check_data(data)?;
    let n = data.n();
    let q = spec.dim();
    if let Some(w) = assembly.subject_weights {
        assert_eq!(w.len(), n, "one weight per subject");
    }
    let tau = data.tau();
    let times: Vec<f64> = data
        .distinct_visit_times()
        .into_iter()
        .filter(|&t| t <= tau)
        .collect();
    let features = times
        .iter()
        .map(|&t| spec.time_features(t))
        .collect::<Result<Vec<_>, _>>()?;

    // Band rank order: subjects sorted by decreasing terminal score, so
    // {l : s_l > c} is a prefix.
    let mut by_score: Vec<usize> = (0..n).collect();
    by_score.sort_by(|&a, &b| {
        index.terminal_score[b]
            .total_cmp(&index.terminal_score[a])
            .then(a.cmp(&b))
    });
    let mut rank = vec![0usize; n];
    for (r, &l) in by_score.iter().enumerate() {
        rank[l] = r;
    }
    let sorted_scores: Vec<f64> = by_score.iter().map(|&l| index.terminal_score[l]).collect();
    // subjects ordered by relative risk; thresholds at time t are monotone in it
    let mut by_risk: Vec<usize> = (0..n).collect();
    by_risk.sort_by(|&a, &b| {
        index.relative_risk[a]
            .total_cmp(&index.relative_risk[b])
            .then(a.cmp(&b))
    });

    // visit value at each (subject, time index)
    let visit_lookup: Vec<Vec<(usize, f64)>> = {
        let mut per_time = vec![Vec::new(); times.len()];
        for (l, vs) in data.visits().iter().enumerate() {
            for v in vs {
                if let Ok(k) = times.binary_search_by(|x| x.total_cmp(&v.time)) {
                    per_time[k].push((l, v.value));
                }
            }
        }
        per_time
    };

    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..times.len())
        .into_par_iter()
        .map(|k| {
            sweep_time(
                data,
                index,
                assembly,
                times[k],
                &features[k],
                &visit_lookup[k],
                &by_risk,
                &rank,
                &sorted_scores,
                q,
            )
        })
        .collect();

    let mut lhs = DMatrix::<f64>::zeros(q, q);
    let mut rhs = DVector::<f64>::zeros(q);
    for (l, r) in &partials {
        for a in 0..q {
            rhs[a] += r[a];
            for b in 0..q {
                lhs[(a, b)] += l[a * q + b];
            }
        }
    }
    Ok(NormalEquations { lhs, rhs })
}

/// Contribution of one visit time to `(lhs, rhs)`, row-major `lhs`.
#[allow(clippy::too_many_arguments)]
fn sweep_time(
    data: &TrialData,
    index: &RiskScoreIndex,
    assembly: &Assembly<'_>,
    t: f64,
    features: &[f64],
    visiting: &[(usize, f64)],
    by_risk: &[usize],
    rank: &[usize],
    sorted_scores: &[f64],
    q: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = data.n();
    let subjects = data.subjects();
    let weight = |l: usize| assembly.subject_weights.map_or(1.0, |w| w[l]);
    let lam = index.baseline.eval(t);

    let mut own_visit: Vec<Option<f64>> = vec![None; n];
    for &(l, y) in visiting {
        own_visit[l] = Some(y);
    }

    // node layout: [w, w Z̃ (q), w Y dN, w Z̃ dN (q)]
    let width = 2 + 2 * q;
    let mut tree = Fenwick::new(n, width);
    let mut node = vec![0.0; width];
    let mut z = vec![0.0; q];
    let mut sums = vec![0.0; width];
    let mut lhs = vec![0.0; q * q];
    let mut rhs = vec![0.0; q];
    let mut centered = vec![0.0; q];
    let mut jump = vec![0.0; q];

    let mut inserted = 0;
    // thresholds c_i = lam e^{r_i} are nondecreasing along by_risk, so
    // insertion of {l : lam e^{r_l} <= c_i} only ever advances.
    for &i in by_risk {
        let level = lam * index.relative_risk[i];
        while inserted < n {
            let l = by_risk[inserted];
            if lam * index.relative_risk[l] > level {
                break;
            }
            let w = weight(l);
            fill_design(&subjects[l], features, &mut z);
            node.fill(0.0);
            node[0] = w;
            for a in 0..q {
                node[1 + a] = w * z[a];
            }
            if let Some(y) = own_visit[l] {
                node[1 + q] = w * y;
                for a in 0..q {
                    node[2 + q + a] = w * z[a];
                }
            }
            tree.add(rank[l], &node);
            inserted += 1;
        }
        if !(subjects[i].followup_time > t) {
            continue;
        }
        let band = sorted_scores.partition_point(|&s| s > level);
        tree.prefix(band, &mut sums);
        let denom = sums[0];
        if !(denom > 0.0) {
            continue;
        }
        let mut omega = weight(i);
        if let Some(f) = assembly.visit_weight {
            omega *= f(i, t);
        }
        if omega == 0.0 {
            continue;
        }
        fill_design(&subjects[i], features, &mut z);
        for a in 0..q {
            centered[a] = z[a] - sums[1 + a] / denom;
        }
        let mut y_term = -sums[1 + q] / denom;
        for a in 0..q {
            jump[a] = -sums[2 + q + a] / denom;
        }
        if let Some(y) = own_visit[i] {
            y_term += y;
            for a in 0..q {
                jump[a] += z[a];
            }
        }
        for a in 0..q {
            let ca = omega * centered[a];
            rhs[a] += ca * y_term;
            let row = &mut lhs[a * q..(a + 1) * q];
            for b in 0..q {
                row[b] += ca * jump[b];
            }
        }
    }
    (lhs, rhs)
}

/// Solution of the normal equations with its conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub beta: Vec<f64>,
    pub condition_estimate: f64,
}

/// Rank-revealing (SVD) solve of `lhs β = rhs`.
pub fn solve_beta(eq: &NormalEquations, labels: &[String]) -> Result<Solution, SjmError> {
    let q = eq.lhs.nrows();
    assert_eq!(q, eq.lhs.ncols());
    assert_eq!(q, eq.rhs.len());
    for c in 0..q {
        if eq.lhs.column(c).iter().all(|&v| v == 0.0) && eq.lhs.row(c).iter().all(|&v| v == 0.0)
        {
            let name = labels.get(c).map_or("?", String::as_str);
            let hint = if c == 0 || name.starts_with("A*") {
                " (treatment-dependent column vanishes: are both arms present?)"
            } else {
                ""
            };
            return Err(SjmError::NotIdentifiable(format!(
                "design column {c} `{name}` carries no information{hint}"
            )));
        }
    }
    let svd = eq.lhs.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition_estimate = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition_estimate <= MAX_CONDITION) {
        return Err(SjmError::NotIdentifiable(format!(
            "normal-equation matrix is singular or ill-conditioned (condition {condition_estimate:e})"
        )));
    }
    let beta = svd
        .solve(&eq.rhs, 0.0)
        .map_err(|e| SjmError::NotIdentifiable(e.to_string()))?;
    Ok(Solution {
        beta: beta.iter().copied().collect(),
        condition_estimate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SjmOptions {
    pub cox: CoxOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SjmFit {
    pub cox: CoxFit,
    pub beta_hat: Vec<f64>,
    /// Bracketed matrix of the closed form; `lhs / n` estimates the matrix
    /// whose nonsingularity identifies β.
    pub lhs_matrix: DMatrix<f64>,
    pub rhs_vector: DVector<f64>,
    pub design: DesignSpec,
    pub labels: Vec<String>,
    pub condition_estimate: f64,
    /// Relative `‖U(β̂)‖∞`.
    pub residual: f64,
}

/// Cox fit, Breslow baseline, risk-score bands, assembly and solve.
pub fn fit_sjm(data: &TrialData, spec: &DesignSpec, options: &SjmOptions) -> Result<SjmFit, SjmError> {
    fit_sjm_with(data, spec, options, None, Assembly::default())
}

/// Full pipeline with optional Cox warm start and assembly weights. Subject
/// weights, when present, also weight the Cox partial likelihood and the
/// Breslow estimator.
pub fn fit_sjm_with(
    data: &TrialData,
    spec: &DesignSpec,
    options: &SjmOptions,
    cox_start: Option<&[f64]>,
    assembly: Assembly<'_>,
) -> Result<SjmFit, SjmError> {
    spec.check_data(data)?;
    let cox = fit_cox_weighted(data, assembly.subject_weights, cox_start, &options.cox)?;
    let index = RiskScoreIndex::from_fit(data, &cox);
    let eq = assemble_normal_equations(data, &index, spec, &assembly)?;
    let labels = spec.labels();
    let solution = solve_beta(&eq, &labels)?;
    let residual = relative_residual(&eq, &solution.beta);
    if !(residual <= RESIDUAL_TOL) {
        return Err(SjmError::Residual(residual));
    }
    Ok(SjmFit {
        cox,
        beta_hat: solution.beta,
        lhs_matrix: eq.lhs,
        rhs_vector: eq.rhs,
        design: spec.clone(),
        labels,
        condition_estimate: solution.condition_estimate,
        residual,
    })
}

fn relative_residual(eq: &NormalEquations, beta: &[f64]) -> f64 {
    let u = eq.estimating_function(beta);
    let beta_norm = beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    let scale = eq.rhs.amax().max(eq.lhs.amax() * beta_norm);
    let unorm = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale > 0.0 {
        unorm / scale
    } else {
        unorm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cox::breslow;
    use crate::data::Visit;

    fn subject(id: &str, a: f64, z: &[f64], t: f64, event: bool) -> Subject {
        let mut covariates = vec![a];
        covariates.extend_from_slice(z);
        Subject {
            id: id.into(),
            covariates,
            followup_time: t,
            event,
        }
    }

    /// 3-subject fixture: (T, δ) = (1,1), (2,1), (3,0), z = (0, 1, 0).
    fn three() -> (TrialData, RiskScoreIndex) {
        let subjects = vec![
            subject("a", 0.0, &[], 1.0, true),
            subject("b", 1.0, &[], 2.0, true),
            subject("c", 0.0, &[], 3.0, false),
        ];
        let visits = vec![
            vec![Visit { time: 0.5, value: 1.0 }],
            vec![
                Visit { time: 0.5, value: 2.0 },
                Visit { time: 1.5, value: 3.0 },
            ],
            vec![
                Visit { time: 0.5, value: 4.0 },
                Visit { time: 1.5, value: 5.0 },
            ],
        ];
        let data = TrialData::new(subjects, visits, None).unwrap();
        let eta = [1.0];
        let base = breslow(&data, &eta).unwrap();
        let index = RiskScoreIndex::new(&data, &eta, base);
        (data, index)
    }

    #[test]
    fn design_layouts() {
        let s = subject("x", 1.0, &[0.5], 5.0, true);
        assert_eq!(
            build_design(&DesignSpec::linear(2), &s, 2.0).unwrap(),
            vec![1.0, 2.0, 0.5]
        );
        let s0 = subject("y", 1.0, &[], 9.0, true);
        let cp = DesignSpec::change_point(3.0, 10.0, 1).unwrap();
        assert_eq!(build_design(&cp, &s0, 2.0).unwrap(), vec![1.0, 2.0, 0.0]);
        assert_eq!(build_design(&cp, &s0, 5.0).unwrap(), vec![1.0, 5.0, 2.0]);
        let basis = SplineBasis::new(3, vec![4.0], 10.0).unwrap();
        let sp = DesignSpec::spline(basis, 2);
        assert_eq!(sp.dim(), 6);
        assert_eq!(
            build_design(&sp, &s, 0.0).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.5]
        );
        assert!(matches!(
            build_design(&sp, &s, 11.0),
            Err(SjmError::Spline(SplineError::Extrapolation { .. }))
        ));
        assert!(DesignSpec::change_point(10.0, 10.0, 1).is_err());
        assert!(DesignSpec::change_point(0.0, 10.0, 1).is_err());
    }

    #[test]
    fn phi_self_comparison() {
        let (_, index) = three();
        // Λ(0.5) = 0: φ_j = 1 iff s_j > 0
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(index.phi(j, 0.5, i), index.terminal_score[j] > 0.0);
            }
        }
        // j = i with Λ(t) > 0 reduces to Λ(T_i) > Λ(t)
        let base = &index.baseline;
        for i in 0..3 {
            let t = 1.5;
            let expected = base.eval([1.0, 2.0, 3.0][i]) > base.eval(t);
            assert_eq!(index.phi(i, t, i), expected);
        }
    }

    #[test]
    fn phi_truth_table() {
        let (data, index) = three();
        // Λ with η = 1: jumps 1/(1 + e + 1) at 1 and 1/(e + 1) at 2.
        let e = 1f64.exp();
        let l1 = 1.0 / (2.0 + e);
        let l2 = l1 + 1.0 / (1.0 + e);
        let lam_term = [l1, l2, l2];
        let rr = [1.0, e, 1.0];
        for &t in &[0.5, 1.5] {
            let lam_t = if t < 1.0 { 0.0 } else { l1 };
            for i in 0..3 {
                for j in 0..3 {
                    let s_j = lam_term[j] * rr[j];
                    let expected = s_j > lam_t * rr[i] && lam_t * rr[i] >= lam_t * rr[j];
                    assert_eq!(index.phi(j, t, i), expected, "t={t} i={i} j={j}");
                }
            }
        }
        assert_eq!(data.n(), 3);
        assert!(index.phi(2, 1.5, 2));
        assert!(!index.phi(1, 1.5, 2));
        assert!(!index.phi(2, 1.5, 1));
        assert!(index.phi(1, 1.5, 1));
    }

    #[test]
    fn centered_terms_by_enumeration() {
        let (data, index) = three();
        let spec = DesignSpec::linear(1);
        for &t in &[0.5, 1.5] {
            for i in 0..3 {
                let ct = centered_terms(&data, &index, &spec, i, t).unwrap();
                let members: Vec<usize> = (0..3).filter(|&l| index.phi(l, t, i)).collect();
                assert_eq!(ct.denom, members.len() as f64);
                if members.is_empty() {
                    assert_eq!(ct.z_bar, vec![0.0, 0.0]);
                    assert_eq!(ct.dy_bar, 0.0);
                    continue;
                }
                let m = members.len() as f64;
                let a_bar: f64 = members.iter().map(|&l| data.subjects()[l].treatment()).sum::<f64>() / m;
                assert!((ct.z_bar[0] - a_bar).abs() < 1e-15);
                assert!((ct.z_bar[1] - a_bar * t).abs() < 1e-15);
                let y: f64 = members
                    .iter()
                    .filter_map(|&l| data.visits()[l].iter().find(|v| v.time == t))
                    .map(|v| v.value)
                    .sum();
                assert!((ct.dy_bar - y / m).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn homogeneous_scores_give_plain_average() {
        let subjects = vec![
            subject("a", 0.0, &[], 1.0, true),
            subject("b", 1.0, &[], 2.0, true),
            subject("c", 1.0, &[], 3.0, true),
            subject("d", 0.0, &[], 4.0, false),
        ];
        let visits = vec![vec![]; 4];
        let data = TrialData::new(subjects, visits, None).unwrap();
        let base = breslow(&data, &[0.0]).unwrap();
        let index = RiskScoreIndex::new(&data, &[0.0], base.clone());
        let spec = DesignSpec::linear(1);
        let t = 1.5;
        let ct = centered_terms(&data, &index, &spec, 3, t).unwrap();
        let members: Vec<usize> = (0..4)
            .filter(|&l| base.eval(data.subjects()[l].followup_time) > base.eval(t))
            .collect();
        // the censored subject d still carries Λ(T_d) = Λ(3) > Λ(1.5)
        assert_eq!(members, vec![1, 2, 3]);
        assert!((ct.z_bar[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((ct.z_bar[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_band_contributes_nothing() {
        // nobody has an event after t = 2.5, so every band at 2.5 is empty
        let subjects = vec![
            subject("a", 0.0, &[], 1.0, true),
            subject("b", 1.0, &[], 3.0, false),
            subject("c", 1.0, &[], 4.0, false),
        ];
        let visits = vec![
            vec![Visit { time: 0.0, value: 1.0 }],
            vec![Visit { time: 2.5, value: 2.0 }],
            vec![Visit { time: 2.5, value: 7.0 }],
        ];
        let data = TrialData::new(subjects, visits, None).unwrap();
        let base = breslow(&data, &[0.0]).unwrap();
        let index = RiskScoreIndex::new(&data, &[0.0], base);
        let spec = DesignSpec::linear(1);
        let ct = centered_terms(&data, &index, &spec, 1, 2.5).unwrap();
        assert_eq!(ct.denom, 0.0);
        assert_eq!(ct.z_bar, vec![0.0, 0.0]);
        let eq = assemble_normal_equations(&data, &index, &spec, &Assembly::default()).unwrap();
        // only the t = 0 summands remain; at t = 0 Λ = 0 and every subject
        // with s > 0 matches, so b and c centre the lone visit of a
        assert!(eq.lhs.iter().all(|v| v.is_finite()));
        let ct0 = centered_terms(&data, &index, &spec, 0, 0.0).unwrap();
        assert_eq!(ct0.denom, 3.0);
    }

    #[test]
    fn nobody_survives_first_visit() {
        let subjects = vec![
            subject("a", 0.0, &[], 0.5, true),
            subject("b", 1.0, &[], 0.7, true),
        ];
        let visits = vec![vec![], vec![]];
        let mut data = TrialData::new(subjects.clone(), visits, Some(2.0)).unwrap();
        let base = breslow(&data, &[0.0]).unwrap();
        let index = RiskScoreIndex::new(&data, &[0.0], base);
        let eq = assemble_normal_equations(&data, &index, &DesignSpec::linear(1), &Assembly::default())
            .unwrap();
        assert!(eq.lhs.iter().all(|&v| v == 0.0));
        assert!(eq.rhs.iter().all(|&v| v == 0.0));
        // with a visit after everyone has terminated the result is still empty
        data = TrialData::new(
            vec![subjects[0].clone(), subjects[1].clone(), subject("c", 0.0, &[], 5.0, false)],
            vec![vec![], vec![], vec![Visit { time: 1.0, value: 3.0 }]],
            None,
        )
        .unwrap();
        let base = breslow(&data, &[0.0]).unwrap();
        let index = RiskScoreIndex::new(&data, &[0.0], base);
        let eq = assemble_normal_equations(&data, &index, &DesignSpec::linear(1), &Assembly::default())
            .unwrap();
        assert!(eq.lhs.iter().all(|&v| v == 0.0));
        assert!(eq.rhs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_arm_not_identifiable() {
        let subjects = (0..6)
            .map(|k| subject(&format!("s{k}"), 0.0, &[k as f64 * 0.1], 1.0 + k as f64, k % 2 == 0))
            .collect();
        let visits = (0..6)
            .map(|k| {
                (0..=k)
                    .map(|v| Visit {
                        time: v as f64,
                        value: 10.0 - v as f64 + k as f64,
                    })
                    .collect()
            })
            .collect();
        let data = TrialData::new(subjects, visits, None).unwrap();
        // the Cox stage already refuses a constant treatment column
        assert!(matches!(
            fit_sjm(&data, &DesignSpec::linear(2), &SjmOptions::default()),
            Err(SjmError::Cox(CoxError::NotIdentifiable(_)))
        ));
        let eta = [0.0, 0.3];
        let index = RiskScoreIndex::new(&data, &eta, breslow(&data, &eta).unwrap());
        let spec = DesignSpec::linear(2);
        let eq = assemble_normal_equations(&data, &index, &spec, &Assembly::default()).unwrap();
        match solve_beta(&eq, &spec.labels()).unwrap_err() {
            SjmError::NotIdentifiable(msg) => assert!(msg.contains("`A`"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fenwick_prefix_sums() {
        let mut f = Fenwick::new(5, 2);
        for k in 0..5 {
            f.add(k, &[1.0, k as f64]);
        }
        let mut out = [0.0; 2];
        f.prefix(3, &mut out);
        assert_eq!(out, [3.0, 3.0]);
        f.prefix(0, &mut out);
        assert_eq!(out, [0.0, 0.0]);
        f.prefix(5, &mut out);
        assert_eq!(out, [5.0, 10.0]);
    }
}
