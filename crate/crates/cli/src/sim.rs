//! `generate` and `simulate`.

use pgee_core::csvio::write_dataset_path;
use pgee_core::EstimatorId;
use pgee_sim::datagen::{calibrate_intercept, generate_replication, Scenario};
use pgee_sim::harness::effective_workers;
use pgee_sim::output::{summary_json, write_outputs};
use pgee_sim::{run_grid, GridConfig, HarnessConfig};

use crate::{CliResult, Failure, GenerateArgs, GridArgs, SimulateArgs};

const FULL_REPS: usize = 5000;
const DEFAULT_REPS: usize = 1000;
const DEFAULT_PRESET: &str = "default";

fn load_grid(args: &GridArgs) -> Result<GridConfig, Failure> {
    let mut grid = match (&args.config, &args.preset) {
        (Some(path), _) => GridConfig::from_path(path)?,
        (None, Some(name)) => GridConfig::preset(name)?,
        (None, None) => GridConfig::preset(DEFAULT_PRESET)?,
    };
    if let Some(seed) = args.seed {
        grid.seed = Some(seed);
    }
    Ok(grid)
}

fn grid_source(args: &GridArgs) -> String {
    match (&args.config, &args.preset) {
        (Some(path), _) => path.display().to_string(),
        (None, Some(name)) => format!("preset {name}"),
        (None, None) => format!("preset {DEFAULT_PRESET}"),
    }
}

fn select(scenarios: Vec<Scenario>, key: Option<&str>) -> Result<Vec<(usize, Scenario)>, Failure> {
    let indexed = scenarios.into_iter().enumerate();
    let Some(key) = key else {
        return Ok(indexed.collect());
    };
    let picked: Vec<_> = match key.parse::<usize>() {
        Ok(i) => indexed.filter(|(j, _)| *j == i).collect(),
        Err(_) => indexed.filter(|(_, s)| s.id == key).collect(),
    };
    if picked.is_empty() {
        return Err(Failure::Input(format!("no scenario matches `{key}`")));
    }
    Ok(picked)
}

pub fn generate(args: &GenerateArgs) -> CliResult {
    if args.reps == 0 {
        return Err(Failure::Input("--reps must be positive".into()));
    }
    let grid = load_grid(&args.grid)?;
    let chosen = select(grid.scenarios()?, args.scenario.as_deref())?;
    std::fs::create_dir_all(&args.out)?;
    println!(
        "generate: {}, seed {}, {} scenario(s), {} dataset(s) each, into {}",
        grid_source(&args.grid),
        grid.seed(),
        chosen.len(),
        args.reps,
        args.out.display()
    );
    for (index, scenario) in &chosen {
        let beta0 = calibrate_intercept(scenario)?;
        for rep in 0..args.reps {
            let (data, invalid) =
                generate_replication(scenario, beta0, rep as u64, HarnessConfig::default().max_draw_attempts)?;
            let path = args.out.join(format!("s{index:03}_r{rep:04}.csv"));
            write_dataset_path(&data, &path)?;
            println!(
                "{}  {}  beta0 {beta0:.6}  invalid draws {invalid}",
                path.display(),
                scenario.id
            );
        }
    }
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> CliResult {
    let grid = load_grid(&args.grid)?;
    let scenarios = grid.scenarios()?;
    let reps = if args.full {
        FULL_REPS
    } else {
        args.reps.or(grid.reps).unwrap_or(DEFAULT_REPS)
    };
    let estimators = match &args.estimators {
        Some(s) => EstimatorId::parse_list(s)?,
        None => grid.estimator_ids()?,
    };
    let defaults = HarnessConfig::default();
    let cfg = HarnessConfig {
        reps,
        workers: args.workers.or(grid.workers).unwrap_or(defaults.workers),
        estimators,
        min_converged: args
            .min_converged
            .or(grid.min_converged)
            .unwrap_or(defaults.min_converged),
        ..defaults
    };
    if !args.json {
        println!(
            "simulate: {}, {} scenarios, reps {}, seed {}, workers {}, min-converged {}, tol {:e}, estimators {}",
            grid_source(&args.grid),
            scenarios.len(),
            cfg.reps,
            grid.seed(),
            effective_workers(cfg.workers),
            cfg.min_converged,
            cfg.fit_options.tol,
            cfg.estimators.iter().map(|e| e.tag()).collect::<Vec<_>>().join(",")
        );
    }
    let outcomes = run_grid(&scenarios, &cfg)?;
    write_outputs(&args.out, &outcomes, &cfg, grid.seed())?;

    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&summary_json(&outcomes, &cfg, grid.seed()))?
        );
        return Ok(());
    }
    let shown: Vec<EstimatorId> = [EstimatorId::Lz, EstimatorId::Kc, EstimatorId::Md, EstimatorId::Ar]
        .into_iter()
        .filter(|id| cfg.estimators.contains(id))
        .collect();
    for o in &outcomes {
        let mut line = format!("{}  converged {}/{}", o.scenario.id, o.census.converged, o.census.reps);
        match &o.result {
            Some(r) => {
                if let Some(c) = r.coefficients.first() {
                    line.push_str(&format!("  rejection[{}]", c.name));
                    for id in &shown {
                        if let Some(m) = c.metrics(*id) {
                            line.push_str(&format!(" {} {:.3}", id.tag(), m.rejection_rate));
                        }
                    }
                }
            }
            None => line.push_str(&format!("  {}", o.error.as_deref().unwrap_or("no result"))),
        }
        println!("{line}");
    }
    println!(
        "wrote {} and {}",
        args.out.join("results.csv").display(),
        args.out.join("summary.json").display()
    );
    Ok(())
}
