//! Monte Carlo replications, per-scenario aggregation and grid execution.

use std::collections::BTreeMap;

use pgee_core::varest::{estimate_all, wald_test, EstimatorOptions};
use pgee_core::{fit, AlphaMode, DivergenceReason, EstimatorId, FitOptions, Model};
use rayon::prelude::*;

use crate::datagen::{calibrate_intercept, generate_replication, Scenario};
use crate::error::{Result, SimError};

/// Nominal test level.
pub const LEVEL: f64 = 0.05;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "PGEE_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub reps: usize,
    pub workers: usize,
    pub estimators: Vec<EstimatorId>,
    pub estimator_options: EstimatorOptions,
    pub fit_options: FitOptions,
    /// Aggregation refuses scenarios with fewer converged replications.
    pub min_converged: usize,
    /// Generation attempts per replication before giving up.
    pub max_draw_attempts: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            reps: 1000,
            workers: 1,
            estimators: EstimatorId::ALL.to_vec(),
            estimator_options: EstimatorOptions::default(),
            fit_options: FitOptions::default(),
            min_converged: 100,
            max_draw_attempts: 100,
        }
    }
}

/// Worker count after applying the `PGEE_THREADS` cap.
pub fn effective_workers(requested: usize) -> usize {
    let requested = requested.max(1);
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        Some(cap) if cap >= 1 => requested.min(cap),
        _ => requested,
    }
}

/// One estimator's outcome on one replication, per tested coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRecord {
    pub id: EstimatorId,
    pub se: Vec<Option<f64>>,
    pub reject: Vec<Option<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub converged: bool,
    pub diverged_reason: Option<DivergenceReason>,
    pub invalid_draws: usize,
    /// Whether generation gave up after too many invalid draws.
    pub generation_failed: bool,
    pub beta_hat: Vec<f64>,
    /// Empty unless converged.
    pub estimators: Vec<EstimatorRecord>,
}

/// Generate, fit, evaluate the configured estimators and test each of the
/// scenario's tested coefficients against zero.
pub fn run_replication(scenario: &Scenario, beta0: f64, rep: usize, cfg: &HarnessConfig) -> Result<ReplicationRecord> {
    let (data, invalid_draws) = match generate_replication(scenario, beta0, rep as u64, cfg.max_draw_attempts) {
        Ok(v) => v,
        Err(SimError::DrawAttemptsExhausted { attempts }) => {
            return Ok(ReplicationRecord {
                rep,
                converged: false,
                diverged_reason: None,
                invalid_draws: attempts,
                generation_failed: true,
                beta_hat: Vec::new(),
                estimators: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    };
    let wm = Model::new(scenario.working_structure).with_alpha(AlphaMode::Estimate);
    let fitted = fit(&data, &wm, &cfg.fit_options)?;
    let mut record = ReplicationRecord {
        rep,
        converged: fitted.converged,
        diverged_reason: fitted.diverged_reason,
        invalid_draws,
        generation_failed: false,
        beta_hat: fitted.beta_hat.iter().copied().collect(),
        estimators: Vec::new(),
    };
    let Some(kernel) = fitted.converged_kernel() else {
        return Ok(record);
    };
    let tested = scenario.tested_coefficients();
    let n = kernel.n_clusters();
    let p = kernel.p();
    for est in estimate_all(kernel, &cfg.estimators, &cfg.estimator_options) {
        let mut se = Vec::with_capacity(tested.len());
        let mut reject = Vec::with_capacity(tested.len());
        for &s in &tested {
            match est.se_of(s) {
                Some(v) => {
                    let w = wald_test(fitted.beta_hat[s], v, n, p, 0.0)?;
                    se.push(Some(v));
                    reject.push(Some(w.rejects(LEVEL)));
                }
                None => {
                    se.push(None);
                    reject.push(None);
                }
            }
        }
        record.estimators.push(EstimatorRecord { id: est.id, se, reject });
    }
    Ok(record)
}

/// Replication counts and convergence accounting for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Census {
    pub reps: usize,
    pub converged: usize,
    pub invalid_draws: usize,
    pub generation_failures: usize,
    pub divergence: BTreeMap<String, usize>,
}

impl Census {
    pub fn from_records(records: &[ReplicationRecord]) -> Self {
        let mut divergence = BTreeMap::new();
        for r in records {
            if let Some(reason) = r.diverged_reason {
                *divergence.entry(reason.to_string()).or_insert(0) += 1;
            }
        }
        Self {
            reps: records.len(),
            converged: records.iter().filter(|r| r.converged).count(),
            invalid_draws: records.iter().map(|r| r.invalid_draws).sum(),
            generation_failures: records.iter().filter(|r| r.generation_failed).count(),
            divergence,
        }
    }

    pub fn convergence_rate(&self) -> f64 {
        if self.reps == 0 {
            0.0
        } else {
            self.converged as f64 / self.reps as f64
        }
    }
}

/// Operating characteristics of one estimator for one coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorMetrics {
    pub id: EstimatorId,
    pub n_computable: usize,
    pub rejection_rate: f64,
    /// Binomial Monte Carlo standard error of the rejection rate.
    pub mc_se: f64,
    /// The same standard error evaluated at the nominal level.
    pub mc_se_nominal: f64,
    pub median_se: f64,
    pub median_se_ratio: f64,
    pub cv_se: f64,
    pub skewness_se: f64,
    pub p95_over_p50: f64,
    pub p99_over_p50: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientResult {
    pub index: usize,
    pub name: String,
    pub true_value: f64,
    pub mean_estimate: f64,
    /// Standard deviation of the estimates over converged replications.
    pub sim_se: f64,
    pub estimators: Vec<EstimatorMetrics>,
}

impl CoefficientResult {
    pub fn metrics(&self, id: EstimatorId) -> Option<&EstimatorMetrics> {
        self.estimators.iter().find(|m| m.id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub beta0: f64,
    pub census: Census,
    pub coefficients: Vec<CoefficientResult>,
}

impl ScenarioResult {
    pub fn b_effective(&self) -> usize {
        self.census.converged
    }

    pub fn coefficient(&self, index: usize) -> Option<&CoefficientResult> {
        self.coefficients.iter().find(|c| c.index == index)
    }
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with the `n - 1` divisor.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Moment skewness `g1 = m3 / m2^{3/2}`.
pub fn skewness(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    if m2 == 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

fn estimator_metrics(id: EstimatorId, ses: &[f64], rejects: &[bool], sim_se: f64) -> EstimatorMetrics {
    let n = rejects.len();
    let rate = if n == 0 {
        f64::NAN
    } else {
        rejects.iter().filter(|&&r| r).count() as f64 / n as f64
    };
    let mut sorted = ses.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let p50 = quantile_sorted(&sorted, 0.5);
    let m = mean(ses);
    let sd = if ses.len() == 1 { 0.0 } else { sample_sd(ses) };
    EstimatorMetrics {
        id,
        n_computable: n,
        rejection_rate: rate,
        mc_se: (rate * (1.0 - rate) / n as f64).sqrt(),
        mc_se_nominal: (LEVEL * (1.0 - LEVEL) / n as f64).sqrt(),
        median_se: p50,
        median_se_ratio: p50 / sim_se,
        cv_se: sd / m,
        skewness_se: skewness(ses),
        p95_over_p50: quantile_sorted(&sorted, 0.95) / p50,
        p99_over_p50: quantile_sorted(&sorted, 0.99) / p50,
    }
}

/// Summarizes replications over converged records, and for each estimator
/// over the records where it was computable.
pub fn aggregate(
    scenario: &Scenario,
    beta0: f64,
    records: &[ReplicationRecord],
    cfg: &HarnessConfig,
) -> Result<ScenarioResult> {
    let census = Census::from_records(records);
    if census.converged < cfg.min_converged {
        return Err(SimError::TooFewConverged {
            converged: census.converged,
            required: cfg.min_converged,
        });
    }
    let converged: Vec<&ReplicationRecord> = records.iter().filter(|r| r.converged).collect();
    let names = crate::datagen::covariate_names(scenario.model);
    let truth = scenario.true_beta(beta0);
    let mut coefficients = Vec::new();
    for (slot, &s) in scenario.tested_coefficients().iter().enumerate() {
        let estimates: Vec<f64> = converged.iter().map(|r| r.beta_hat[s]).collect();
        let sim_se = sample_sd(&estimates);
        let estimators = cfg
            .estimators
            .iter()
            .enumerate()
            .map(|(e, &id)| {
                let mut ses = Vec::new();
                let mut rejects = Vec::new();
                for r in &converged {
                    let rec = &r.estimators[e];
                    if let (Some(se), Some(rej)) = (rec.se[slot], rec.reject[slot]) {
                        ses.push(se);
                        rejects.push(rej);
                    }
                }
                estimator_metrics(id, &ses, &rejects, sim_se)
            })
            .collect();
        coefficients.push(CoefficientResult {
            index: s,
            name: names[s].clone(),
            true_value: truth[s],
            mean_estimate: mean(&estimates),
            sim_se,
            estimators,
        });
    }
    Ok(ScenarioResult {
        scenario: scenario.clone(),
        beta0,
        census,
        coefficients,
    })
}

/// Runs every replication of one scenario on a pool of `workers` threads.
/// Records come back in replication order, so results do not depend on
/// the worker count.
pub fn run_replications(
    scenario: &Scenario,
    beta0: f64,
    cfg: &HarnessConfig,
    pool: &rayon::ThreadPool,
) -> Result<Vec<ReplicationRecord>> {
    pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| run_replication(scenario, beta0, rep, cfg))
            .collect()
    })
}

pub fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(effective_workers(workers))
        .build()
        .map_err(|e| SimError::Config(format!("thread pool: {e}")))
}

/// Outcome of one grid scenario: metrics, or the reason aggregation failed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub scenario: Scenario,
    pub beta0: f64,
    pub census: Census,
    pub result: Option<ScenarioResult>,
    pub error: Option<String>,
}

pub fn run_scenario(scenario: &Scenario, cfg: &HarnessConfig, pool: &rayon::ThreadPool) -> Result<ScenarioOutcome> {
    scenario.validate()?;
    let beta0 = calibrate_intercept(scenario)?;
    let records = run_replications(scenario, beta0, cfg, pool)?;
    let census = Census::from_records(&records);
    Ok(match aggregate(scenario, beta0, &records, cfg) {
        Ok(r) => ScenarioOutcome {
            scenario: scenario.clone(),
            beta0,
            census,
            result: Some(r),
            error: None,
        },
        Err(e @ SimError::TooFewConverged { .. }) => ScenarioOutcome {
            scenario: scenario.clone(),
            beta0,
            census,
            result: None,
            error: Some(e.to_string()),
        },
        Err(e) => return Err(e),
    })
}

/// Executes scenarios in order.
pub fn run_grid(scenarios: &[Scenario], cfg: &HarnessConfig) -> Result<Vec<ScenarioOutcome>> {
    if cfg.reps == 0 {
        return Err(SimError::Config("reps must be positive".into()));
    }
    cfg.fit_options.validate()?;
    cfg.estimator_options.validate()?;
    for s in scenarios {
        s.validate()?;
    }
    let pool = build_pool(cfg.workers)?;
    scenarios.iter().map(|s| run_scenario(s, cfg, &pool)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(converged: bool, beta1: f64, se: Option<f64>, reject: Option<bool>) -> ReplicationRecord {
        ReplicationRecord {
            rep: 0,
            converged,
            diverged_reason: (!converged).then_some(DivergenceReason::BetaCap),
            invalid_draws: 0,
            generation_failed: false,
            beta_hat: vec![0.0, beta1, 0.0],
            estimators: if converged {
                vec![EstimatorRecord {
                    id: EstimatorId::Lz,
                    se: vec![se],
                    reject: vec![reject],
                }]
            } else {
                Vec::new()
            },
        }
    }

    fn cfg() -> HarnessConfig {
        HarnessConfig {
            estimators: vec![EstimatorId::Lz],
            min_converged: 4,
            ..HarnessConfig::default()
        }
    }

    fn scenario() -> Scenario {
        Scenario::new("s", 10, 0.2, 0.2, pgee_core::CorrStructure::Exchangeable)
    }

    #[test]
    fn type7_quantiles() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&xs, 0.5), 3.0);
        assert_eq!(quantile_sorted(&xs, 0.95), 4.8);
        assert_eq!(quantile_sorted(&[2.0, 4.0], 0.5), 3.0);
    }

    #[test]
    fn no_rejections_give_zero_rate() {
        let recs: Vec<_> = [-1.0, 1.0, -0.5, 0.5]
            .iter()
            .map(|&b| record(true, b, Some(0.8), Some(false)))
            .collect();
        let r = aggregate(&scenario(), -1.5, &recs, &cfg()).unwrap();
        let m = r.coefficient(1).unwrap().metrics(EstimatorId::Lz).unwrap();
        assert_eq!(m.rejection_rate, 0.0);
        assert_eq!(m.n_computable, 4);
    }

    #[test]
    fn constant_se_equal_to_simse_gives_unit_ratio() {
        let betas = [-1.0, 1.0, -1.0, 1.0];
        let sd = sample_sd(&betas);
        let recs: Vec<_> = betas.iter().map(|&b| record(true, b, Some(sd), Some(true))).collect();
        let r = aggregate(&scenario(), -1.5, &recs, &cfg()).unwrap();
        let m = r.coefficient(1).unwrap().metrics(EstimatorId::Lz).unwrap();
        assert!((m.median_se_ratio - 1.0).abs() < 1e-15);
        assert_eq!(m.cv_se, 0.0);
        assert_eq!(m.rejection_rate, 1.0);
    }

    #[test]
    fn non_converged_records_are_excluded() {
        let mut recs: Vec<_> = [-1.0, 1.0, -0.5, 0.5]
            .iter()
            .map(|&b| record(true, b, Some(0.8), Some(false)))
            .collect();
        recs.push(record(false, 40.0, None, None));
        let r = aggregate(&scenario(), -1.5, &recs, &cfg()).unwrap();
        assert_eq!(r.census.reps, 5);
        assert_eq!(r.census.converged, 4);
        assert_eq!(r.census.divergence.get("beta-cap"), Some(&1));
        let c = r.coefficient(1).unwrap();
        assert!((c.mean_estimate).abs() < 1e-15);
    }

    #[test]
    fn incomputable_records_excluded_per_estimator() {
        let mut recs: Vec<_> = [-1.0, 1.0, -0.5, 0.5]
            .iter()
            .map(|&b| record(true, b, Some(0.8), Some(true)))
            .collect();
        recs.push(record(true, 0.0, None, None));
        let r = aggregate(&scenario(), -1.5, &recs, &cfg()).unwrap();
        let m = r.coefficient(1).unwrap().metrics(EstimatorId::Lz).unwrap();
        assert_eq!(m.n_computable, 4);
        assert_eq!(m.rejection_rate, 1.0);
    }

    #[test]
    fn too_few_converged_is_an_error() {
        let recs = vec![record(true, 0.1, Some(0.5), Some(false)); 3];
        assert!(matches!(
            aggregate(&scenario(), -1.5, &recs, &cfg()),
            Err(SimError::TooFewConverged {
                converged: 3,
                required: 4
            })
        ));
    }

    #[test]
    fn skewness_of_symmetric_data_is_zero() {
        assert!(skewness(&[1.0, 2.0, 3.0]).abs() < 1e-15);
        assert!(skewness(&[1.0, 1.0, 1.0, 10.0]) > 0.0);
    }
}
