//! `pgee`: fit, diagnose, generate and simulate.
//!
//! Exit status is 0 on success, 1 on input or configuration errors and 2
//! when the fit does not converge (the report is still printed).

mod report;
mod sim;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pgee_core::{AlphaMode, CorrStructure, DispersionMode, EstimatorId, EstimatorOptions, FitOptions, Model};

#[derive(Debug, Parser)]
#[command(name = "pgee", version, about = "Penalized GEE for clustered binary outcomes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and report standard errors under every estimator.
    Fit(FitArgs),
    /// Report the leverage overcorrection diagnostic for a fitted model.
    Diagnose(DiagnoseArgs),
    /// Write simulated datasets for scenarios of a grid.
    Generate(GenerateArgs),
    /// Run a scenario grid and write results.csv and summary.json.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Long-format CSV with header `cluster,y,<covariates>...`.
    input: PathBuf,
    /// Working correlation: exch, ar1 or ind.
    #[arg(long, default_value = "exch")]
    corr: String,
    /// Fixed correlation parameter or `estimate`.
    #[arg(long, default_value = "estimate")]
    alpha: String,
    /// Fixed dispersion or `estimate` for the Pearson plug-in.
    #[arg(long, default_value = "1")]
    phi: String,
    /// Fit the unpenalized GEE.
    #[arg(long)]
    no_penalty: bool,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    /// Print a JSON report instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// `all` or a comma-separated list of estimator tags.
    #[arg(long, default_value = "all")]
    estimators: String,
    /// Leverage clipping threshold of the FG estimator.
    #[arg(long, default_value_t = 0.75)]
    fg_clip: f64,
    /// Leverage exponent of the WB estimator.
    #[arg(long, default_value_t = 0.5)]
    wb_exponent: f64,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Binary cluster-level covariate used for the 1/(N_min - 1) benchmark.
    #[arg(long)]
    treatment_col: Option<String>,
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Grid config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in grid: quick, core-null, core-null-n10, default, extended.
    #[arg(long)]
    preset: Option<String>,
    /// Base seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Scenario index or id; all scenarios when omitted.
    #[arg(long)]
    scenario: Option<String>,
    /// Datasets per scenario.
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value = "pgee-data")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Replications per scenario; overrides the config.
    #[arg(long, conflicts_with = "full")]
    reps: Option<usize>,
    /// Run 5000 replications per scenario.
    #[arg(long)]
    full: bool,
    /// Worker threads, capped by PGEE_THREADS.
    #[arg(long)]
    workers: Option<usize>,
    /// `all` or a comma-separated list of estimator tags.
    #[arg(long)]
    estimators: Option<String>,
    /// Minimum converged replications for a scenario to be summarized.
    #[arg(long)]
    min_converged: Option<usize>,
    #[arg(long, default_value = "pgee-results")]
    out: PathBuf,
    /// Print the summary as JSON.
    #[arg(long)]
    json: bool,
}

/// Failure modes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Input(String),
    NotConverged,
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.to_string())
    }
}

type CliResult = std::result::Result<(), Failure>;

impl ModelArgs {
    fn working_model(&self) -> Result<Model, Failure> {
        let structure: CorrStructure = self.corr.parse()?;
        let mut wm = Model::new(structure);
        if structure != CorrStructure::Independence || self.alpha != "estimate" {
            wm = wm.with_alpha(parse_mode(&self.alpha, "alpha")?.map_or(AlphaMode::Estimate, AlphaMode::Fixed));
        }
        let phi = parse_mode(&self.phi, "phi")?.map_or(DispersionMode::PearsonPlugin, DispersionMode::Fixed);
        Ok(wm.with_dispersion(phi))
    }

    fn fit_options(&self) -> Result<FitOptions, Failure> {
        let opts = FitOptions {
            penalized: !self.no_penalty,
            max_iter: self.max_iter,
            tol: self.tol,
            ..FitOptions::default()
        };
        opts.validate()?;
        Ok(opts)
    }
}

/// `None` for `estimate`, otherwise the number.
fn parse_mode(value: &str, flag: &str) -> Result<Option<f64>, Failure> {
    if value.eq_ignore_ascii_case("estimate") {
        return Ok(None);
    }
    value
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Failure::Input(format!("--{flag} expects a number or `estimate`, got `{value}`")))
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Fit(args) => {
            let ids = EstimatorId::parse_list(&args.estimators)?;
            let opts = EstimatorOptions {
                fg_clip: args.fg_clip,
                wb_exponent: args.wb_exponent,
            };
            opts.validate()?;
            report::fit(&args.model, &ids, &opts)
        }
        Command::Diagnose(args) => report::diagnose(&args.model, args.treatment_col.as_deref()),
        Command::Generate(args) => sim::generate(&args),
        Command::Simulate(args) => sim::simulate(&args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::NotConverged) => ExitCode::from(2),
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
