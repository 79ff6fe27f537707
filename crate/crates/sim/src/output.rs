//! `results.csv` and `summary.json` writers.
//!
//! `results.csv` has one row per scenario, tested coefficient and
//! estimator. Missing values (incomputable metrics, failed scenarios) are
//! empty fields. Neither file records the worker count, so outputs are
//! byte-identical across thread counts.

use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::datagen::Scenario;
use crate::error::{Result, SimError};
use crate::harness::{HarnessConfig, ScenarioOutcome};

pub const SCHEMA_VERSION: u32 = 1;

pub const RESULT_COLUMNS: [&str; 33] = [
    "scenario_id",
    "status",
    "n_clusters",
    "cluster_sizes",
    "event_rate",
    "rho",
    "true_structure",
    "working_structure",
    "gamma",
    "beta0",
    "beta1",
    "beta2",
    "model",
    "reps",
    "converged",
    "convergence_rate",
    "invalid_draws",
    "coefficient",
    "true_value",
    "mean_estimate",
    "sim_se",
    "estimator",
    "n_computable",
    "rejection_rate",
    "mc_se",
    "mc_se_nominal",
    "median_se",
    "median_se_ratio",
    "cv_se",
    "skewness_se",
    "p95_over_p50",
    "p99_over_p50",
    "seed",
];

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

fn scenario_fields(s: &Scenario, beta0: f64) -> Vec<String> {
    vec![
        s.n_clusters.to_string(),
        s.sizes.to_string(),
        num(s.event_rate),
        num(s.rho),
        s.true_structure.tag().to_owned(),
        s.working_structure.tag().to_owned(),
        num(s.gamma),
        num(beta0),
        num(s.beta1),
        num(s.beta2),
        s.model.tag().to_owned(),
    ]
}

pub fn write_results_csv<W: Write>(outcomes: &[ScenarioOutcome], cfg: &HarnessConfig, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let map = |e: csv::Error| SimError::Io(std::io::Error::other(e));
    w.write_record(RESULT_COLUMNS).map_err(map)?;
    for o in outcomes {
        let s = &o.scenario;
        let mut head = vec![
            s.id.clone(),
            if o.result.is_some() { "ok" } else { "too-few-converged" }.to_owned(),
        ];
        head.extend(scenario_fields(s, o.beta0));
        head.extend([
            o.census.reps.to_string(),
            o.census.converged.to_string(),
            num(o.census.convergence_rate()),
            o.census.invalid_draws.to_string(),
        ]);
        match &o.result {
            Some(r) => {
                for c in &r.coefficients {
                    for m in &c.estimators {
                        let mut row = head.clone();
                        row.extend([
                            c.name.clone(),
                            num(c.true_value),
                            num(c.mean_estimate),
                            num(c.sim_se),
                            m.id.tag().to_owned(),
                            m.n_computable.to_string(),
                            num(m.rejection_rate),
                            num(m.mc_se),
                            num(m.mc_se_nominal),
                            num(m.median_se),
                            num(m.median_se_ratio),
                            num(m.cv_se),
                            num(m.skewness_se),
                            num(m.p95_over_p50),
                            num(m.p99_over_p50),
                            s.seed.to_string(),
                        ]);
                        w.write_record(&row).map_err(map)?;
                    }
                }
            }
            None => {
                let names = crate::datagen::covariate_names(s.model);
                for idx in s.tested_coefficients() {
                    for id in &cfg.estimators {
                        let mut row = head.clone();
                        row.push(names[idx].clone());
                        row.extend(std::iter::repeat_n(String::new(), 3));
                        row.push(id.tag().to_owned());
                        row.extend(std::iter::repeat_n(String::new(), 10));
                        row.push(s.seed.to_string());
                        w.write_record(&row).map_err(map)?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

pub fn summary_json(outcomes: &[ScenarioOutcome], cfg: &HarnessConfig, base_seed: u64) -> Value {
    let scenarios: Vec<Value> = outcomes
        .iter()
        .map(|o| {
            json!({
                "id": o.scenario.id,
                "seed": o.scenario.seed,
                "beta0": finite_or_null(o.beta0),
                "status": if o.result.is_some() { "ok" } else { "too-few-converged" },
                "error": o.error,
                "reps": o.census.reps,
                "converged": o.census.converged,
                "convergence_rate": finite_or_null(o.census.convergence_rate()),
                "invalid_draws": o.census.invalid_draws,
                "generation_failures": o.census.generation_failures,
                "divergence": o.census.divergence,
            })
        })
        .collect();
    let total_reps: usize = outcomes.iter().map(|o| o.census.reps).sum();
    let total_converged: usize = outcomes.iter().map(|o| o.census.converged).sum();
    json!({
        "schema_version": SCHEMA_VERSION,
        "base_seed": base_seed,
        "reps": cfg.reps,
        "estimators": cfg.estimators.iter().map(|e| e.tag()).collect::<Vec<_>>(),
        "fit": {
            "penalized": cfg.fit_options.penalized,
            "max_iter": cfg.fit_options.max_iter,
            "tol": cfg.fit_options.tol,
            "beta_cap": cfg.fit_options.beta_cap,
        },
        "estimator_options": {
            "fg_clip": cfg.estimator_options.fg_clip,
            "wb_exponent": cfg.estimator_options.wb_exponent,
        },
        "min_converged": cfg.min_converged,
        "scenario_count": outcomes.len(),
        "census": {
            "reps": total_reps,
            "converged": total_converged,
            "invalid_draws": outcomes.iter().map(|o| o.census.invalid_draws).sum::<usize>(),
            "scenarios_below_min_converged": outcomes.iter().filter(|o| o.result.is_none()).count(),
        },
        "scenarios": scenarios,
    })
}

/// Writes `results.csv` and `summary.json` into `dir`, creating it if needed.
pub fn write_outputs(
    dir: impl AsRef<Path>,
    outcomes: &[ScenarioOutcome],
    cfg: &HarnessConfig,
    base_seed: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let file = std::fs::File::create(dir.join("results.csv"))?;
    write_results_csv(outcomes, cfg, std::io::BufWriter::new(file))?;
    let mut text = serde_json::to_string_pretty(&summary_json(outcomes, cfg, base_seed))
        .map_err(|e| SimError::Io(std::io::Error::other(e)))?;
    text.push('\n');
    std::fs::write(dir.join("summary.json"), text)?;
    Ok(())
}
