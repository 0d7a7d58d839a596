//! `sjm` command-line front end: fit a dataset, run a Monte-Carlo study, or
//! emit effect-curve plot data.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sjm::perturb::{bands_from, perturb_around};
use sjm::sim::{g_true, replicate_dataset};
use sjm::{
    fit_sjm, run_mc, DataError, DesignRecipe, PerturbConfig, PerturbError, ScenarioConfig,
    Setting, SimError, SjmError, SjmOptions, SplineError, TrialData,
};

#[derive(Parser, Debug)]
#[command(name = "sjm", version, about = "Semiparametric joint model for outcomes truncated by a terminal event")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the joint model to subject and visit CSV files.
    Fit(FitArgs),
    /// Monte-Carlo study of one simulation setting.
    Simulate(SimulateArgs),
    /// Effect curve of a spline fit with pointwise 95% bands.
    Curve(CurveArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DesignKind {
    Linear,
    Changepoint,
    Spline,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct DesignArgs {
    #[arg(long, value_enum, default_value = "linear", env = "SJM_DESIGN")]
    design: DesignKind,
    /// Change point for `--design changepoint`.
    #[arg(long = "t-star", env = "SJM_T_STAR")]
    t_star: Option<f64>,
    #[arg(long, default_value_t = 3, env = "SJM_DEGREE")]
    degree: usize,
    /// Number of interior knots, placed at quantiles of the visit times.
    #[arg(long, default_value_t = 3, env = "SJM_KNOTS")]
    knots: usize,
    /// Explicit interior knot locations; overrides `--knots`.
    #[arg(long = "knot-at", value_delimiter = ',', env = "SJM_KNOT_AT")]
    knot_at: Option<Vec<f64>>,
}

impl DesignArgs {
    fn recipe(&self) -> Result<DesignRecipe> {
        if self.t_star.is_some() && self.design != DesignKind::Changepoint {
            bail!(ConfigError("--t-star is only valid with --design changepoint".into()));
        }
        if self.knot_at.is_some() && self.design != DesignKind::Spline {
            bail!(ConfigError("--knot-at is only valid with --design spline".into()));
        }
        Ok(match self.design {
            DesignKind::Linear => DesignRecipe::Linear,
            DesignKind::Changepoint => DesignRecipe::ChangePoint {
                t_star: self.t_star.ok_or_else(|| {
                    ConfigError("--design changepoint requires --t-star".into())
                })?,
            },
            DesignKind::Spline => self.spline_recipe(),
        })
    }

    fn spline_recipe(&self) -> DesignRecipe {
        match &self.knot_at {
            Some(knots) => DesignRecipe::SplineAt {
                degree: self.degree,
                knots: knots.clone(),
            },
            None => DesignRecipe::Spline {
                degree: self.degree,
                interior_knots: self.knots,
            },
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// Perturbation replicates.
    #[arg(long = "b", default_value_t = PerturbConfig::DEFAULT_REPLICATES, env = "SJM_B")]
    b: usize,
    /// Master seed; drawn from entropy and printed when absent.
    #[arg(long, env = "SJM_SEED")]
    seed: Option<u64>,
    #[arg(long, default_value = ".", env = "SJM_OUT")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv", env = "SJM_FORMAT")]
    format: Format,
}

#[derive(Args, Debug)]
struct InputArgs {
    #[arg(long, env = "SJM_SUBJECTS")]
    subjects: Option<PathBuf>,
    #[arg(long, env = "SJM_VISITS")]
    visits: Option<PathBuf>,
    /// End of study; defaults to the largest follow-up time.
    #[arg(long, env = "SJM_TAU")]
    tau: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    design: DesignArgs,
    #[command(flatten)]
    common: Common,
    /// Curve grid for spline designs (comma separated).
    #[arg(long, value_delimiter = ',', env = "SJM_GRID")]
    grid: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, env = "SJM_SETTING")]
    setting: u8,
    #[arg(long, default_value_t = 200, env = "SJM_N")]
    n: usize,
    #[arg(long, default_value_t = 1000, env = "SJM_REPLICATES")]
    replicates: usize,
    #[command(flatten)]
    design: DesignArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CurveArgs {
    /// Simulate one trial from this setting (3) instead of reading files.
    #[arg(long, env = "SJM_SETTING")]
    setting: Option<u8>,
    #[arg(long, default_value_t = 200, env = "SJM_N")]
    n: usize,
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 3, env = "SJM_DEGREE")]
    degree: usize,
    #[arg(long, default_value_t = 3, env = "SJM_KNOTS")]
    knots: usize,
    #[arg(long = "knot-at", value_delimiter = ',', env = "SJM_KNOT_AT")]
    knot_at: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', env = "SJM_GRID")]
    grid: Option<Vec<f64>>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Curve(args) => cmd_curve(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let report = json!({
                "error": {
                    "kind": error_kind(&err),
                    "message": format!("{err:#}"),
                }
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return "config";
        }
        if let Some(e) = cause.downcast_ref::<SimError>() {
            return match e {
                SimError::Study { .. } => "study",
                SimError::Config(_) => "config",
                _ => "simulation",
            };
        }
        if cause.is::<DataError>() {
            return "data";
        }
        if cause.is::<SplineError>() {
            return "domain";
        }
        if cause.is::<SjmError>() {
            return "fit";
        }
        if let Some(e) = cause.downcast_ref::<PerturbError>() {
            return match e {
                PerturbError::Config(_) => "config",
                PerturbError::Spline(_) => "domain",
                _ => "resampling",
            };
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s: u64 = rand::random();
        println!("seed: {s}");
        s
    })
}

fn load(input: &InputArgs) -> Result<TrialData> {
    let subjects = input
        .subjects
        .as_ref()
        .ok_or_else(|| ConfigError("--subjects is required".into()))?;
    let visits = input
        .visits
        .as_ref()
        .ok_or_else(|| ConfigError("--visits is required".into()))?;
    let s = File::open(subjects).with_context(|| format!("cannot open {}", subjects.display()))?;
    let v = File::open(visits).with_context(|| format!("cannot open {}", visits.display()))?;
    let data = TrialData::from_csv(s, v, input.tau).with_context(|| {
        format!("reading {} and {}", subjects.display(), visits.display())
    })?;
    Ok(data)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(file))
}

/// `0.5, 1.0, ...` up to `min(10, tau)`.
fn default_grid(tau: f64) -> Vec<f64> {
    let top = tau.min(10.0);
    (1..)
        .map(|k| 0.5 * k as f64)
        .take_while(|&t| t <= top + 1e-12)
        .collect()
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let recipe = args.design.recipe()?;
    let data = load(&args.input)?;
    let seed = resolve_seed(args.common.seed);
    let options = SjmOptions::default();
    let spec = recipe.build(&data)?;
    let fit = fit_sjm(&data, &spec, &options)?;
    let config = PerturbConfig::new(args.common.b, seed);
    let result = perturb_around(&data, &fit, &config, &options)?;
    let report = json!({
        "design": format!("{:?}", args.design.design).to_lowercase(),
        "n": data.n(),
        "tau": data.tau(),
        "seed": seed,
        "eta_hat": result.eta_hat,
        "eta_se": result.eta_se,
        "eta_ci95": result.eta_ci95,
        "eta_model_se": fit.cox.standard_errors(),
        "labels": result.labels,
        "beta_hat": result.beta_hat,
        "beta_se": result.beta_se,
        "beta_ci95": result.beta_ci95,
        "B": config.replicates,
        "B_effective": result.b_effective,
        "failures": result.failures,
        "condition_estimate": fit.condition_estimate,
        "relative_residual": fit.residual,
        "basis": match &fit.design.variant {
            sjm::DesignVariant::Spline(b) => serde_json::to_value(b)?,
            _ => serde_json::Value::Null,
        },
    });
    let mut out = create(&args.common.out, "fit.json")?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    if args.design.design == DesignKind::Spline {
        let grid = args.grid.unwrap_or_else(|| default_grid(data.tau()));
        let curve = bands_from(&fit, &result, &grid)?;
        match args.common.format {
            Format::Csv => curve.write_csv(create(&args.common.out, "curve.csv")?)?,
            Format::Json => serde_json::to_writer_pretty(create(&args.common.out, "curve.json")?, &curve)?,
        }
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let setting = Setting::from_number(args.setting)
        .ok_or_else(|| ConfigError(format!("--setting must be 1, 2 or 3, got {}", args.setting)))?;
    let recipe = args.design.recipe()?;
    if args.replicates < 2 {
        bail!(ConfigError(format!(
            "--replicates must be at least 2 for an empirical SE, got {}",
            args.replicates
        )));
    }
    let seed = resolve_seed(args.common.seed);
    let config = ScenarioConfig::new(setting, args.n, seed);
    let perturb = PerturbConfig::new(args.common.b, seed);
    let report = run_mc(&config, &recipe, args.replicates, &perturb, &SjmOptions::default())?;
    let stem = format!("table1_setting{}", setting.number());
    report.write_csv(create(&args.common.out, &format!("{stem}.csv"))?)?;
    let mut json_out = create(&args.common.out, &format!("{stem}.json"))?;
    serde_json::to_writer_pretty(
        &mut json_out,
        &json!({ "seed": seed, "config": config, "report": report }),
    )?;
    Ok(())
}

fn cmd_curve(args: CurveArgs) -> Result<()> {
    if let Some(grid) = &args.grid {
        sjm::spline::check_grid(grid)?;
    }
    let seed = resolve_seed(args.common.seed);
    let (data, simulated) = match args.setting {
        Some(3) => {
            if args.input.subjects.is_some() || args.input.visits.is_some() {
                bail!(ConfigError("--setting and input files are mutually exclusive".into()));
            }
            let config = ScenarioConfig::new(Setting::S3, args.n, seed);
            (replicate_dataset(&config, 0)?.data, true)
        }
        Some(k) => bail!(ConfigError(format!(
            "curve simulation supports setting 3 only, got {k}"
        ))),
        None => (load(&args.input)?, false),
    };
    let recipe = match &args.knot_at {
        Some(knots) => DesignRecipe::SplineAt {
            degree: args.degree,
            knots: knots.clone(),
        },
        None => DesignRecipe::Spline {
            degree: args.degree,
            interior_knots: args.knots,
        },
    };
    let options = SjmOptions::default();
    let spec = recipe.build(&data)?;
    let fit = fit_sjm(&data, &spec, &options)?;
    let config = PerturbConfig::new(args.common.b, seed);
    let result = perturb_around(&data, &fit, &config, &options)?;
    let grid = args.grid.unwrap_or_else(|| default_grid(data.tau()));
    let curve = bands_from(&fit, &result, &grid)?;
    let truth: Option<Vec<f64>> =
        simulated.then(|| grid.iter().map(|&t| g_true(t) / t).collect());
    match args.common.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(create(&args.common.out, "curve.csv")?);
            let mut header = vec!["t"];
            if truth.is_some() {
                header.push("truth");
            }
            header.extend(["est", "se", "lo95", "hi95"]);
            w.write_record(&header)?;
            for k in 0..grid.len() {
                let est = curve.delta_yslope[k];
                let se = curve.pointwise_se[k];
                let mut row = vec![grid[k].to_string()];
                if let Some(tr) = &truth {
                    row.push(tr[k].to_string());
                }
                row.extend([est, se, est - 1.96 * se, est + 1.96 * se].map(|x| x.to_string()));
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        Format::Json => {
            serde_json::to_writer_pretty(
                create(&args.common.out, "curve.json")?,
                &json!({ "seed": seed, "truth": truth, "curve": curve }),
            )?;
        }
    }
    Ok(())
}
