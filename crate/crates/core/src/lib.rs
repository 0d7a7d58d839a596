//! Semiparametric joint model for a longitudinal outcome whose collection is
//! terminated by a dependent event.
//!
//! The pipeline is: [`cox`] fits the terminal-event model, [`sjm`] builds
//! risk-score matched bands and solves the linear estimating equation for the
//! treatment effects on the outcome trajectory, [`spline`] supplies the
//! nonlinear time basis, [`perturb`] estimates variability by weighted
//! refits, and [`sim`] runs Monte-Carlo studies on synthetic trials.

pub mod cox;
pub mod data;
pub mod perturb;
pub mod seed;
pub mod sim;
pub mod sjm;
pub mod spline;

pub use cox::{breslow, cox_score_and_info, fit_cox, CoxError, CoxFit, CoxOptions, StepFunction};
pub use data::{DataError, DataSummary, Subject, TrialData, Visit};
pub use perturb::{curve_bands, perturb_fit, PerturbConfig, PerturbError, PerturbResult, WeightLaw};
pub use sim::{run_mc, run_mc_curve, CurveReport, McReport, ScenarioConfig, Setting, SimError};
pub use sjm::{
    assemble_normal_equations, build_design, fit_sjm, solve_beta, DesignRecipe, DesignSpec,
    DesignVariant, RiskScoreIndex, SjmError, SjmFit, SjmOptions,
};
pub use spline::{effect_curve, make_basis, EffectCurve, SplineBasis, SplineError};
