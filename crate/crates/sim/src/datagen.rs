//! Correlated binary longitudinal data from the conditional linear family,
//! with intercept calibration to a target marginal event rate.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector};
use pgee_core::{Cluster, CorrStructure, Dataset, INTERCEPT_NAME};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SimError};

/// Spacing of the time grid: `t_ij = TIME_STEP * j` for `j = 1..n_i`.
pub const TIME_STEP: f64 = 0.2;

/// Bisection bracket and tolerance for intercept calibration.
pub const CALIBRATION_BRACKET: (f64, f64) = (-20.0, 20.0);
pub const CALIBRATION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelForm {
    /// Intercept, treatment and time (`p = 3`).
    Full,
    /// Intercept and treatment only (`p = 2`).
    Reduced,
}

impl ModelForm {
    pub fn n_params(self) -> usize {
        match self {
            ModelForm::Full => 3,
            ModelForm::Reduced => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModelForm::Full => "full",
            ModelForm::Reduced => "reduced",
        }
    }
}

/// Cluster sizes: a single constant, or a pattern cycled over clusters.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClusterSizes(pub Vec<usize>);

impl ClusterSizes {
    pub fn constant(n: usize) -> Self {
        Self(vec![n])
    }

    pub fn size_of(&self, cluster: usize) -> usize {
        self.0[cluster % self.0.len()]
    }

    pub fn is_balanced(&self) -> bool {
        self.0.iter().all(|&n| n == self.0[0])
    }

    pub fn max(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }
}

impl fmt::Display for ClusterSizes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join("/"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub n_clusters: usize,
    pub sizes: ClusterSizes,
    pub event_rate: f64,
    pub rho: f64,
    pub true_structure: CorrStructure,
    pub working_structure: CorrStructure,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub model: ModelForm,
    pub seed: u64,
}

impl Scenario {
    /// Core-design defaults: four observations per cluster, 30% treated,
    /// null treatment effect with a time slope of 0.2.
    pub fn new(id: impl Into<String>, n_clusters: usize, event_rate: f64, rho: f64, structure: CorrStructure) -> Self {
        Self {
            id: id.into(),
            n_clusters,
            sizes: ClusterSizes::constant(4),
            event_rate,
            rho,
            true_structure: structure,
            working_structure: structure,
            gamma: 0.3,
            beta1: 0.0,
            beta2: 0.2,
            model: ModelForm::Full,
            seed: 0,
        }
    }

    pub fn treated_count(&self) -> usize {
        (self.gamma * self.n_clusters as f64).round() as usize
    }

    pub fn is_treated(&self, cluster: usize) -> bool {
        cluster < self.treated_count()
    }

    pub fn n_params(&self) -> usize {
        self.model.n_params()
    }

    /// Coefficient indices subjected to Wald tests: treatment always, time
    /// when its true coefficient is zero in the full model.
    pub fn tested_coefficients(&self) -> Vec<usize> {
        let mut out = vec![1];
        if self.model == ModelForm::Full && self.beta2 == 0.0 {
            out.push(2);
        }
        out
    }

    pub fn true_beta(&self, beta0: f64) -> Vec<f64> {
        match self.model {
            ModelForm::Full => vec![beta0, self.beta1, self.beta2],
            ModelForm::Reduced => vec![beta0, self.beta1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SimError::InvalidScenario(format!("{}: {msg}", self.id)));
        if !(self.event_rate > 0.0 && self.event_rate < 1.0) {
            return bad(format!("event rate {} outside (0, 1)", self.event_rate));
        }
        if self.sizes.0.is_empty() || self.sizes.0.iter().any(|&n| n < 2) {
            return bad("cluster sizes must be at least 2".into());
        }
        if self.true_structure == CorrStructure::Independence {
            return bad("true structure must be exchangeable or ar1".into());
        }
        if !self.true_structure.is_admissible(self.rho, self.sizes.max()) {
            return bad(format!("rho {} inadmissible for {}", self.rho, self.true_structure));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        let treated = self.treated_count();
        if treated < 1 || treated + 1 > self.n_clusters {
            return bad(format!(
                "gamma {} leaves an empty arm with N = {}",
                self.gamma, self.n_clusters
            ));
        }
        if self.n_clusters < self.n_params() + 1 {
            return bad(format!("N = {} too small for p = {}", self.n_clusters, self.n_params()));
        }
        if !self.beta1.is_finite() || !self.beta2.is_finite() {
            return bad("coefficients must be finite".into());
        }
        Ok(())
    }

    fn linear_offset(&self, cluster: usize, j: usize) -> f64 {
        let x = if self.is_treated(cluster) { 1.0 } else { 0.0 };
        self.beta1 * x + self.beta2 * TIME_STEP * (j + 1) as f64
    }

    /// Marginal means of one cluster given the intercept.
    pub fn cluster_means(&self, beta0: f64, cluster: usize) -> DVector<f64> {
        let n = self.sizes.size_of(cluster);
        DVector::from_fn(n, |j, _| logistic(beta0 + self.linear_offset(cluster, j)))
    }

    /// Mean of the marginal probabilities over every observation of the design.
    pub fn design_mean(&self, beta0: f64) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..self.n_clusters {
            for j in 0..self.sizes.size_of(i) {
                total += logistic(beta0 + self.linear_offset(i, j));
                count += 1;
            }
        }
        total / count as f64
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Bisection for the intercept whose design-averaged mean equals the
/// scenario's event rate.
pub fn calibrate_intercept(scenario: &Scenario) -> Result<f64> {
    scenario.validate()?;
    let target = scenario.event_rate;
    let (mut lo, mut hi) = CALIBRATION_BRACKET;
    let f = |b: f64| scenario.design_mean(b) - target;
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return Err(SimError::BracketFailure { rate: target });
    }
    while hi - lo > CALIBRATION_TOL {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Regression weights of each position on its predecessors under the
/// correlation matrix `R(rho)`. Row `j` holds `b_{j,0..j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClfCoefficients {
    pub rows: Vec<DVector<f64>>,
}

impl ClfCoefficients {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn clf_coefficients(structure: CorrStructure, rho: f64, n: usize) -> Result<ClfCoefficients> {
    if !structure.is_admissible(rho, n) {
        return Err(SimError::InvalidScenario(format!(
            "rho {rho} inadmissible for {structure}"
        )));
    }
    let r: DMatrix<f64> = structure.matrix(rho, n);
    let mut rows = Vec::with_capacity(n);
    rows.push(DVector::zeros(0));
    for j in 1..n {
        let head = r.view((0, 0), (j, j)).into_owned();
        let rhs = r.view((0, j), (j, 1)).column(0).into_owned();
        let chol = Cholesky::new(head).ok_or(SimError::SingularR { rho })?;
        rows.push(chol.solve(&rhs));
    }
    Ok(ClfCoefficients { rows })
}

/// Sequential Bernoulli draws with conditional means
/// `lambda_j = mu_j + sum_k b_jk sqrt(w_j / w_k) (y_k - mu_k)`.
/// Any `lambda_j` outside `(0, 1)` is reported, never clamped.
pub fn clf_generate<R: Rng + ?Sized>(mu: &DVector<f64>, coeffs: &ClfCoefficients, rng: &mut R) -> Result<DVector<f64>> {
    let n = mu.len();
    if coeffs.len() < n {
        return Err(SimError::InvalidScenario(
            "coefficient table shorter than mean vector".into(),
        ));
    }
    let w = mu.map(|m| m * (1.0 - m));
    let mut y = DVector::zeros(n);
    for j in 0..n {
        let mut lambda = mu[j];
        for (k, b) in coeffs.rows[j].iter().enumerate() {
            lambda += b * (w[j] / w[k]).sqrt() * (y[k] - mu[k]);
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(SimError::InvalidDraw);
        }
        y[j] = if rng.random::<f64>() < lambda { 1.0 } else { 0.0 };
    }
    Ok(y)
}

/// Independent stream for one generation attempt of one replication.
pub fn replication_rng(scenario_seed: u64, rep: u64, attempt: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&scenario_seed.to_le_bytes());
    key[8..16].copy_from_slice(&rep.to_le_bytes());
    key[16..24].copy_from_slice(&attempt.to_le_bytes());
    key[24..].copy_from_slice(b"pgee-clf");
    ChaCha8Rng::from_seed(key)
}

/// Seed of the `index`-th scenario of a grid with the given base seed.
pub fn derive_scenario_seed(base: u64, index: u64) -> u64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&base.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(b"scenario");
    ChaCha8Rng::from_seed(key).next_u64()
}

/// Column names of generated datasets (intercept synthesized).
pub fn covariate_names(model: ModelForm) -> Vec<String> {
    let mut names = vec![INTERCEPT_NAME.to_owned(), "trt".to_owned()];
    if model == ModelForm::Full {
        names.push("t".to_owned());
    }
    names
}

/// One dataset: the first `round(gamma N)` clusters are treated and
/// `t_ij = 0.2 j`. Returns `InvalidDraw` when any cluster's conditional
/// means leave the unit interval.
pub fn generate_dataset<R: Rng + ?Sized>(scenario: &Scenario, beta0: f64, rng: &mut R) -> Result<Dataset> {
    let mut tables: Vec<Option<ClfCoefficients>> = vec![None; scenario.sizes.max() + 1];
    let p = scenario.n_params();
    let mut clusters = Vec::with_capacity(scenario.n_clusters);
    for i in 0..scenario.n_clusters {
        let n = scenario.sizes.size_of(i);
        if tables[n].is_none() {
            tables[n] = Some(clf_coefficients(scenario.true_structure, scenario.rho, n)?);
        }
        let mu = scenario.cluster_means(beta0, i);
        let y = clf_generate(&mu, tables[n].as_ref().expect("filled above"), rng)?;
        let trt = if scenario.is_treated(i) { 1.0 } else { 0.0 };
        let time = DVector::from_fn(n, |j, _| TIME_STEP * (j + 1) as f64);
        let x = DMatrix::from_fn(n, p, |j, k| match k {
            0 => 1.0,
            1 => trt,
            _ => time[j],
        });
        let time = (scenario.model == ModelForm::Full).then_some(time);
        clusters.push(Cluster::new(format!("{}", i + 1), y, x, time)?);
    }
    Ok(Dataset::new(clusters, covariate_names(scenario.model))?)
}

/// Draws a replication, retrying on invalid draws with fresh streams.
/// Returns the dataset and the number of invalid attempts.
pub fn generate_replication(
    scenario: &Scenario,
    beta0: f64,
    rep: u64,
    max_attempts: usize,
) -> Result<(Dataset, usize)> {
    for attempt in 0..max_attempts {
        let mut rng = replication_rng(scenario.seed, rep, attempt as u64);
        match generate_dataset(scenario, beta0, &mut rng) {
            Ok(ds) => return Ok((ds, attempt)),
            Err(SimError::InvalidDraw) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(SimError::DrawAttemptsExhausted { attempts: max_attempts })
}
