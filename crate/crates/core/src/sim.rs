//! Simulation settings and the Monte-Carlo study harness.
//!
//! All settings share the terminal-event model `log(D/10) = -η A + ε` with
//! `ε` Gumbel-for-minimum, i.e. `D = 10 U exp(-η A)` with `U ~ Exp(1)`, so
//! `Λ0(t) = t / 10`. Censoring is `min(Uniform(5, 25), τ)` and a visit occurs
//! at every integer time before follow-up ends.
//!
//! * S1: `Y = b0 + b1 t/4 + β1 A t/4 + e`, latent slope independent of `D`.
//! * S2: `Y = b0 + (b1 - 5v) t/4 + β1 A t/4 + e` with `v = exp(ε)` shared
//!   with the terminal time (informative termination).
//! * S3: `Y = u + 0.2 v t + β0 A + A g(t) + e`, `g(t) = 10 log(1 + t)`.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::{DataError, Subject, TrialData, Visit};
use crate::perturb::{bands_from, column_sd, perturb_around, PerturbConfig, PerturbError};
use crate::seed::{derive_seed, rng_for, SeedTag};
use crate::sjm::{fit_sjm, DesignRecipe, SjmOptions};
use crate::spline::{check_grid, SplineError};

/// Largest tolerated share of failed Monte-Carlo replicates.
pub const MAX_STUDY_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{failed} of {total} replicates failed (limit 5%); first failure: {first}")]
    Study {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Setting {
    S1,
    S2,
    S3,
}

impl Setting {
    pub fn number(self) -> u8 {
        match self {
            Setting::S1 => 1,
            Setting::S2 => 2,
            Setting::S3 => 3,
        }
    }

    pub fn from_number(k: u8) -> Option<Self> {
        match k {
            1 => Some(Setting::S1),
            2 => Some(Setting::S2),
            3 => Some(Setting::S3),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub setting: Setting,
    pub n: usize,
    pub eta_true: f64,
    /// Treatment main effect (S3 only; S1/S2 have none).
    pub beta0: f64,
    /// Generator coefficient of `A t / 4` in S1/S2, so the fitted `A*t`
    /// coefficient targets `beta1 / 4`.
    pub beta1: f64,
    pub tau: f64,
    pub censor_low: f64,
    pub censor_high: f64,
    /// Half-width of uniform jitter added to visit times after baseline.
    pub jitter: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(setting: Setting, n: usize, seed: u64) -> Self {
        Self {
            setting,
            n,
            eta_true: 0.5,
            beta0: 0.0,
            beta1: 8.0,
            tau: 15.0,
            censor_low: 5.0,
            censor_high: 25.0,
            jitter: 0.0,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n < 2 {
            return Err(SimError::Config(format!("n must be at least 2, got {}", self.n)));
        }
        if !(self.tau > 0.0) {
            return Err(SimError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.censor_low >= 0.0 && self.censor_high > self.censor_low) {
            return Err(SimError::Config("censoring bounds out of order".into()));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(SimError::Config(format!(
                "jitter half-width must be in [0, 0.5), got {}",
                self.jitter
            )));
        }
        Ok(())
    }
}

/// Truth of the slope effect in S3.
pub fn g_true(t: f64) -> f64 {
    10.0 * t.ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalDraw {
    pub time: f64,
    pub epsilon: f64,
}

/// Terminal time for arm `a`: `D = 10 U exp(-η a)`, `ε = log U`.
pub fn draw_terminal<R: Rng>(a: f64, eta: f64, rng: &mut R) -> TerminalDraw {
    let u: f64 = Exp1.sample(rng);
    TerminalDraw {
        time: 10.0 * u * (-eta * a).exp(),
        epsilon: u.ln(),
    }
}

pub fn gen_terminal<R: Rng>(a: f64, eta: f64, rng: &mut R) -> f64 {
    draw_terminal(a, eta, rng).time
}

/// Unobserved per-subject quantities, kept for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatentDraw {
    pub terminal_time: f64,
    pub censor_time: f64,
    pub epsilon: f64,
    /// `exp(ε)`
    pub v: f64,
    /// Random slope `b1` (S1/S2); 0 in S3.
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct SimulatedTrial {
    pub data: TrialData,
    pub latent: Vec<LatentDraw>,
}

pub fn simulate_trial<R: Rng>(config: &ScenarioConfig, rng: &mut R) -> Result<SimulatedTrial, SimError> {
    config.validate()?;
    let mut subjects = Vec::with_capacity(config.n);
    let mut visits = Vec::with_capacity(config.n);
    let mut latent = Vec::with_capacity(config.n);
    let width = (config.n - 1).to_string().len();
    for k in 0..config.n {
        let a = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let terminal = draw_terminal(a, config.eta_true, rng);
        let censor = rng
            .random_range(config.censor_low..config.censor_high)
            .min(config.tau);
        let followup = terminal.time.min(censor);
        let v = terminal.epsilon.exp();

        let mut times = Vec::new();
        let mut step = 0usize;
        while (step as f64) < followup {
            let mut t = step as f64;
            if step > 0 && config.jitter > 0.0 {
                t += rng.random_range(-config.jitter..config.jitter);
            }
            if t < followup {
                times.push(t);
            }
            step += 1;
        }

        let normal = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
        let (slope, values) = match config.setting {
            Setting::S1 | Setting::S2 => {
                let b0 = (50.0 + 16.0 * normal(rng)).max(15.0);
                let b1 = -2.0 + 2.75 * normal(rng);
                let slope = if config.setting == Setting::S2 {
                    b1 - 5.0 * v
                } else {
                    b1
                };
                let values: Vec<f64> = times
                    .iter()
                    .map(|&t| {
                        let mean = b0 + slope * t / 4.0 + config.beta1 * a * t / 4.0;
                        mean + (0.667 * mean).abs().sqrt() * normal(rng)
                    })
                    .collect();
                (b1, values)
            }
            Setting::S3 => {
                let u: f64 = Exp1.sample(rng);
                let shift = normal(rng);
                let values = times
                    .iter()
                    .map(|&t| {
                        let mean = u + 0.2 * v * t + config.beta0 * a + a * g_true(t);
                        mean + shift + 0.2 * t * normal(rng)
                    })
                    .collect();
                (0.0, values)
            }
        };
        subjects.push(Subject {
            id: format!("s{k:0width$}"),
            covariates: vec![a],
            followup_time: followup,
            event: terminal.time < censor,
        });
        visits.push(
            times
                .into_iter()
                .zip(values)
                .map(|(time, value)| Visit { time, value })
                .collect(),
        );
        latent.push(LatentDraw {
            terminal_time: terminal.time,
            censor_time: censor,
            epsilon: terminal.epsilon,
            v,
            slope,
        });
    }
    let data = TrialData::new(subjects, visits, Some(config.tau))?;
    Ok(SimulatedTrial { data, latent })
}

pub fn gen_setting<R: Rng>(config: &ScenarioConfig, rng: &mut R) -> Result<TrialData, SimError> {
    simulate_trial(config, rng).map(|s| s.data)
}

/// Dataset of Monte-Carlo replicate `r`.
pub fn replicate_dataset(config: &ScenarioConfig, r: usize) -> Result<SimulatedTrial, SimError> {
    let mut rng = rng_for(config.seed, SeedTag::Dataset, r as u64);
    simulate_trial(config, &mut rng)
}

/// Share of subjects with an observed terminal event over `draws` draws of
/// (arm, terminal time, censoring time).
pub fn event_fraction(config: &ScenarioConfig, draws: usize) -> f64 {
    let mut rng = rng_for(config.seed, SeedTag::Calibration, 0);
    let mut events = 0usize;
    for _ in 0..draws {
        let a = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let d = gen_terminal(a, config.eta_true, &mut rng);
        let c = rng
            .random_range(config.censor_low..config.censor_high)
            .min(config.tau);
        if d < c {
            events += 1;
        }
    }
    events as f64 / draws as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub parameter: String,
    pub truth: Option<f64>,
    pub est: f64,
    pub ese: f64,
    pub ase: f64,
    pub cp: Option<f64>,
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub setting: u8,
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub perturbation_replicates: usize,
    pub rows: Vec<McRow>,
}

impl McReport {
    pub fn row(&self, parameter: &str) -> Option<&McRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }

    /// `parameter,true,est,ese,ase,cp,mse`; unknown truths are left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["parameter", "true", "est", "ese", "ase", "cp", "mse"])?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
        for r in &self.rows {
            w.write_record([
                r.parameter.clone(),
                opt(r.truth),
                format!("{:.6}", r.est),
                format!("{:.6}", r.ese),
                format!("{:.6}", r.ase),
                opt(r.cp),
                opt(r.mse),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Point estimates and perturbation SEs of one replicate.
#[derive(Debug, Clone, PartialEq)]
struct ReplicateEstimate {
    est: Vec<f64>,
    se: Vec<f64>,
}

/// Aggregates replicate estimates into one table row per parameter.
pub fn summarize(
    names: &[String],
    truths: &[Option<f64>],
    estimates: &[Vec<f64>],
    standard_errors: &[Vec<f64>],
) -> Vec<McRow> {
    let r = estimates.len() as f64;
    let ese = column_sd(estimates);
    names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let est = estimates.iter().map(|e| e[k]).sum::<f64>() / r;
            let ase = standard_errors.iter().map(|s| s[k]).sum::<f64>() / r;
            let truth = truths[k];
            let cp = truth.map(|th| {
                estimates
                    .iter()
                    .zip(standard_errors)
                    .filter(|(e, s)| (e[k] - th).abs() <= 1.96 * s[k])
                    .count() as f64
                    / r
            });
            let mse = truth.map(|th| estimates.iter().map(|e| (e[k] - th).powi(2)).sum::<f64>() / r);
            McRow {
                parameter: name.clone(),
                truth,
                est,
                ese: ese[k],
                ase,
                cp,
                mse,
            }
        })
        .collect()
}

fn check_replicates(replicates: usize) -> Result<(), SimError> {
    if replicates < 2 {
        return Err(SimError::Config(format!(
            "need at least 2 replicates for an empirical SE, got {replicates}"
        )));
    }
    Ok(())
}

fn study_failure<T>(
    outcomes: &[Result<T, String>],
    total: usize,
) -> Result<(), SimError> {
    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    if failed as f64 > MAX_STUDY_FAILURE_RATE * total as f64 || total - failed < 2 {
        let first = outcomes
            .iter()
            .find_map(|o| o.as_ref().err().cloned())
            .unwrap_or_default();
        return Err(SimError::Study {
            failed,
            total,
            first,
        });
    }
    Ok(())
}

fn perturb_config_for(base: &PerturbConfig, master: u64, r: usize) -> PerturbConfig {
    PerturbConfig {
        seed: derive_seed(master, SeedTag::Perturbation, r as u64),
        ..*base
    }
}

/// Monte-Carlo study: per replicate generate, fit, and resample.
///
/// Rows are `eta` (one per covariate) followed by the design coefficients.
/// With the linear design in S1/S2 the `A*t` coefficient is reported as
/// `beta1/4`, matching the generator's `β1 A t / 4` term.
pub fn run_mc(
    config: &ScenarioConfig,
    recipe: &DesignRecipe,
    replicates: usize,
    perturb: &PerturbConfig,
    options: &SjmOptions,
) -> Result<McReport, SimError> {
    config.validate()?;
    check_replicates(replicates)?;
    let outcomes: Vec<Result<(Vec<String>, ReplicateEstimate), String>> = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<_, String> {
            let sim = replicate_dataset(config, r).map_err(|e| e.to_string())?;
            let spec = recipe.build(&sim.data).map_err(|e| e.to_string())?;
            let fit = fit_sjm(&sim.data, &spec, options).map_err(|e| e.to_string())?;
            let pc = perturb_config_for(perturb, config.seed, r);
            let res = perturb_around(&sim.data, &fit, &pc, options).map_err(|e| e.to_string())?;
            let mut est = res.eta_hat.clone();
            est.extend_from_slice(&res.beta_hat);
            let mut se = res.eta_se.clone();
            se.extend_from_slice(&res.beta_se);
            Ok((res.labels, ReplicateEstimate { est, se }))
        })
        .collect();
    study_failure(&outcomes, replicates)?;
    let ok: Vec<&(Vec<String>, ReplicateEstimate)> =
        outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let labels = &ok[0].0;
    let covariate_names: Vec<String> = (0..ok[0].1.est.len() - labels.len())
        .map(|k| if k == 0 { "eta".to_string() } else { format!("eta_z{k}") })
        .collect();
    let reports_slope = matches!(recipe, DesignRecipe::Linear)
        && matches!(config.setting, Setting::S1 | Setting::S2);
    let mut names = covariate_names.clone();
    let mut truths: Vec<Option<f64>> = covariate_names
        .iter()
        .enumerate()
        .map(|(k, _)| (k == 0).then_some(config.eta_true))
        .collect();
    for (k, label) in labels.iter().enumerate() {
        match (reports_slope, k) {
            (true, 0) => {
                names.push("beta0".into());
                truths.push(Some(0.0));
            }
            (true, 1) => {
                names.push("beta1/4".into());
                truths.push(Some(config.beta1 / 4.0));
            }
            (_, 0) if config.setting == Setting::S3 => {
                names.push("beta0".into());
                truths.push(Some(config.beta0));
            }
            _ => {
                names.push(label.clone());
                truths.push(None);
            }
        }
    }
    let estimates: Vec<Vec<f64>> = ok.iter().map(|o| o.1.est.clone()).collect();
    let ses: Vec<Vec<f64>> = ok.iter().map(|o| o.1.se.clone()).collect();
    Ok(McReport {
        setting: config.setting.number(),
        n: config.n,
        replicates: ok.len(),
        failures: replicates - ok.len(),
        perturbation_replicates: perturb.replicates,
        rows: summarize(&names, &truths, &estimates, &ses),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveReport {
    pub grid: Vec<f64>,
    pub truth: Vec<f64>,
    pub est: Vec<f64>,
    pub ese: Vec<f64>,
    pub ase: Vec<f64>,
    pub cp: Vec<f64>,
    pub replicates: usize,
    pub failures: usize,
}

impl CurveReport {
    /// `t,truth,est,ese,ase,cp`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "truth", "est", "ese", "ase", "cp"])?;
        for k in 0..self.grid.len() {
            w.write_record([
                self.grid[k].to_string(),
                format!("{:.6}", self.truth[k]),
                format!("{:.6}", self.est[k]),
                format!("{:.6}", self.ese[k]),
                format!("{:.6}", self.ase[k]),
                format!("{:.6}", self.cp[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pointwise study of the estimated slope effect `g(t)/t` in S3.
pub fn run_mc_curve(
    config: &ScenarioConfig,
    recipe: &DesignRecipe,
    grid: &[f64],
    replicates: usize,
    perturb: &PerturbConfig,
    options: &SjmOptions,
) -> Result<CurveReport, SimError> {
    config.validate()?;
    check_grid(grid)?;
    check_replicates(replicates)?;
    if !matches!(recipe, DesignRecipe::Spline { .. } | DesignRecipe::SplineAt { .. }) {
        return Err(SimError::Config("curve study needs a spline design".into()));
    }
    let outcomes: Vec<Result<(Vec<f64>, Vec<f64>), String>> = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<_, String> {
            let sim = replicate_dataset(config, r).map_err(|e| e.to_string())?;
            let spec = recipe.build(&sim.data).map_err(|e| e.to_string())?;
            let fit = fit_sjm(&sim.data, &spec, options).map_err(|e| e.to_string())?;
            let pc = perturb_config_for(perturb, config.seed, r);
            let res = perturb_around(&sim.data, &fit, &pc, options).map_err(|e| e.to_string())?;
            let curve = bands_from(&fit, &res, grid).map_err(|e: PerturbError| e.to_string())?;
            Ok((curve.delta_yslope, curve.pointwise_se))
        })
        .collect();
    study_failure(&outcomes, replicates)?;
    let ok: Vec<&(Vec<f64>, Vec<f64>)> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let names: Vec<String> = grid.iter().map(|t| t.to_string()).collect();
    let truth: Vec<f64> = grid.iter().map(|&t| g_true(t) / t).collect();
    let truths: Vec<Option<f64>> = truth.iter().copied().map(Some).collect();
    let estimates: Vec<Vec<f64>> = ok.iter().map(|o| o.0.clone()).collect();
    let ses: Vec<Vec<f64>> = ok.iter().map(|o| o.1.clone()).collect();
    let rows = summarize(&names, &truths, &estimates, &ses);
    Ok(CurveReport {
        grid: grid.to_vec(),
        truth,
        est: rows.iter().map(|r| r.est).collect(),
        ese: rows.iter().map(|r| r.ese).collect(),
        ase: rows.iter().map(|r| r.ase).collect(),
        cp: rows.iter().map(|r| r.cp.unwrap_or(f64::NAN)).collect(),
        replicates: ok.len(),
        failures: replicates - ok.len(),
    })
}
