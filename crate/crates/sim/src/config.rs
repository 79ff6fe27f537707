//! Scenario-grid configuration.
//!
//! A config is a TOML document with optional top-level run settings and any
//! number of `[[block]]` tables. Each list-valued key of a block is crossed
//! with every other one; scalar defaults fill missing keys.
//!
//! ```toml
//! reps = 1000
//! seed = 42
//! estimators = "all"
//!
//! [[block]]
//! name = "core-null"
//! n_clusters = [10, 20, 30, 50]
//! event_rate = [0.1, 0.2, 0.3]
//! rho = [0.05, 0.1, 0.2, 0.3]
//! structure = ["exch", "ar1"]          # true = working
//! ```
//!
//! Mismatched correlation is written as `(true, working)` pairs:
//! `correlation = [["ar1", "exch"], ["exch", "ar1"]]`.
//! Unbalanced designs list size patterns cycled over clusters:
//! `cluster_sizes = [[2, 6], [3, 8]]`.

use pgee_core::{CorrStructure, EstimatorId};
use serde::Deserialize;

use crate::datagen::{derive_scenario_seed, ClusterSizes, ModelForm, Scenario};
use crate::error::{Result, SimError};

pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub estimators: Option<String>,
    pub min_converged: Option<usize>,
    /// Name of a built-in grid whose blocks precede the file's own.
    pub preset: Option<String>,
    #[serde(default, rename = "block")]
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub name: String,
    pub n_clusters: Vec<usize>,
    #[serde(default = "default_rates")]
    pub event_rate: Vec<f64>,
    #[serde(default = "default_rho")]
    pub rho: Vec<f64>,
    pub structure: Option<Vec<String>>,
    pub correlation: Option<Vec<(String, String)>>,
    #[serde(default = "default_sizes")]
    pub cluster_sizes: Vec<Vec<usize>>,
    #[serde(default = "default_gamma")]
    pub gamma: Vec<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: Vec<f64>,
    #[serde(default = "default_beta2")]
    pub beta2: Vec<f64>,
    #[serde(default = "default_model")]
    pub model: Vec<String>,
}

fn default_rates() -> Vec<f64> {
    vec![0.2]
}
fn default_rho() -> Vec<f64> {
    vec![0.2]
}
fn default_sizes() -> Vec<Vec<usize>> {
    vec![vec![4]]
}
fn default_gamma() -> Vec<f64> {
    vec![0.3]
}
fn default_beta1() -> Vec<f64> {
    vec![0.0]
}
fn default_beta2() -> Vec<f64> {
    vec![0.2]
}
fn default_model() -> Vec<String> {
    vec!["full".into()]
}

fn parse_model(s: &str) -> Result<ModelForm> {
    match s.trim().to_ascii_lowercase().as_str() {
        "full" => Ok(ModelForm::Full),
        "reduced" => Ok(ModelForm::Reduced),
        other => Err(SimError::Config(format!("unknown model `{other}` (full|reduced)"))),
    }
}

fn parse_structure(s: &str) -> Result<CorrStructure> {
    s.parse()
        .map_err(|e: pgee_core::PgeeError| SimError::Config(e.to_string()))
}

fn fmt_num(x: f64) -> String {
    format!("{x}")
}

impl Block {
    fn correlation_pairs(&self) -> Result<Vec<(CorrStructure, CorrStructure)>> {
        match (&self.structure, &self.correlation) {
            (Some(_), Some(_)) => Err(SimError::Config(format!(
                "block `{}`: give either `structure` or `correlation`, not both",
                self.name
            ))),
            (Some(list), None) => list.iter().map(|s| parse_structure(s).map(|c| (c, c))).collect(),
            (None, Some(pairs)) => pairs
                .iter()
                .map(|(t, w)| Ok((parse_structure(t)?, parse_structure(w)?)))
                .collect(),
            (None, None) => Ok(vec![(CorrStructure::Exchangeable, CorrStructure::Exchangeable)]),
        }
    }

    /// Cartesian expansion in a fixed nesting order.
    pub fn expand(&self) -> Result<Vec<Scenario>> {
        let pairs = self.correlation_pairs()?;
        let models = self.model.iter().map(|m| parse_model(m)).collect::<Result<Vec<_>>>()?;
        let lists_nonempty = !self.n_clusters.is_empty()
            && !self.event_rate.is_empty()
            && !self.rho.is_empty()
            && !pairs.is_empty()
            && !self.cluster_sizes.is_empty()
            && !self.gamma.is_empty()
            && !self.beta1.is_empty()
            && !self.beta2.is_empty()
            && !models.is_empty();
        if !lists_nonempty {
            return Err(SimError::Config(format!("block `{}` has an empty list", self.name)));
        }
        let mut out = Vec::new();
        for &n in &self.n_clusters {
            for &rate in &self.event_rate {
                for &rho in &self.rho {
                    for &(truth, working) in &pairs {
                        for sizes in &self.cluster_sizes {
                            for &gamma in &self.gamma {
                                for &beta1 in &self.beta1 {
                                    for &beta2 in &self.beta2 {
                                        for &model in &models {
                                            let sizes = ClusterSizes(sizes.clone());
                                            let id = format!(
                                                "{}/N{}/r{}/rho{}/{}-{}/n{}/g{}/b1={}/b2={}/{}",
                                                self.name,
                                                n,
                                                fmt_num(rate),
                                                fmt_num(rho),
                                                truth.tag(),
                                                working.tag(),
                                                sizes,
                                                fmt_num(gamma),
                                                fmt_num(beta1),
                                                fmt_num(beta2),
                                                model.tag()
                                            );
                                            out.push(Scenario {
                                                id,
                                                n_clusters: n,
                                                sizes,
                                                event_rate: rate,
                                                rho,
                                                true_structure: truth,
                                                working_structure: working,
                                                gamma,
                                                beta1,
                                                beta2,
                                                model,
                                                seed: 0,
                                            });
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

impl GridConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| SimError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = preset_text(name).ok_or_else(|| {
            SimError::Config(format!(
                "unknown preset `{name}` (available: {})",
                PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            ))
        })?;
        Self::from_toml(text)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn estimator_ids(&self) -> Result<Vec<EstimatorId>> {
        match &self.estimators {
            None => Ok(EstimatorId::ALL.to_vec()),
            Some(s) => EstimatorId::parse_list(s).map_err(|e| SimError::Config(e.to_string())),
        }
    }

    /// All scenarios, preset blocks first, with per-scenario seeds derived
    /// from the base seed and the scenario's position.
    pub fn scenarios(&self) -> Result<Vec<Scenario>> {
        let mut blocks = Vec::new();
        if let Some(name) = &self.preset {
            let preset = Self::preset(name)?;
            if preset.preset.is_some() {
                return Err(SimError::Config("presets cannot nest".into()));
            }
            blocks.extend(preset.blocks);
        }
        blocks.extend(self.blocks.iter().cloned());
        if blocks.is_empty() {
            return Err(SimError::Config("config defines no scenarios".into()));
        }
        let mut out = Vec::new();
        for b in &blocks {
            out.extend(b.expand()?);
        }
        let base = self.seed();
        for (i, s) in out.iter_mut().enumerate() {
            s.seed = derive_scenario_seed(base, i as u64);
            s.validate()?;
        }
        Ok(out)
    }
}

const CORE_NULL: &str = r#"
[[block]]
name = "core-null"
n_clusters = [10, 20, 30, 50]
event_rate = [0.1, 0.2, 0.3]
rho = [0.05, 0.1, 0.2, 0.3]
structure = ["exch", "ar1"]
"#;

const SUPPLEMENTARY: &str = r#"
[[block]]
name = "misspecified"
n_clusters = [10, 20, 30, 50]
event_rate = [0.1, 0.2]
rho = [0.2]
correlation = [["ar1", "exch"], ["exch", "ar1"]]

[[block]]
name = "unbalanced"
n_clusters = [10, 20, 30, 50]
cluster_sizes = [[2, 6], [3, 8]]

[[block]]
name = "rare-events"
n_clusters = [30, 50]
event_rate = [0.05]
rho = [0.1, 0.3]
structure = ["exch", "ar1"]

[[block]]
name = "few-clusters"
n_clusters = [5]
cluster_sizes = [[6], [8]]
rho = [0.1, 0.3]
structure = ["exch", "ar1"]

[[block]]
name = "time-null"
n_clusters = [10, 20, 30, 50]
structure = ["exch", "ar1"]
beta2 = [0.0]

[[block]]
name = "power"
n_clusters = [10, 20, 30, 50]
rho = [0.1, 0.3]
structure = ["exch", "ar1"]
beta1 = [0.6931471805599453]
"#;

const SENSITIVITY: &str = r#"
[[block]]
name = "allocation"
n_clusters = [10, 20, 30, 50]
event_rate = [0.1, 0.2, 0.3]
gamma = [0.2, 0.5]

[[block]]
name = "reduced"
n_clusters = [10, 20, 30, 50]
structure = ["exch", "ar1"]
model = ["reduced"]
"#;

const CORE_NULL_N10: &str = r#"
[[block]]
name = "core-null"
n_clusters = [10]
event_rate = [0.1, 0.2, 0.3]
rho = [0.05, 0.1, 0.2, 0.3]
structure = ["exch", "ar1"]
"#;

const QUICK: &str = r#"
[[block]]
name = "quick"
n_clusters = [10, 20]
event_rate = [0.2]
rho = [0.2]
structure = ["exch"]
"#;

/// Built-in grids. `default` is the 160-scenario base design; `extended`
/// adds the allocation and reduced-model sensitivity blocks.
pub const PRESETS: [(&str, &str); 5] = [
    ("core-null", CORE_NULL),
    ("core-null-n10", CORE_NULL_N10),
    ("default", ""),
    ("extended", ""),
    ("quick", QUICK),
];

fn preset_text(name: &str) -> Option<&'static str> {
    use std::sync::OnceLock;
    static DEFAULT: OnceLock<String> = OnceLock::new();
    static EXTENDED: OnceLock<String> = OnceLock::new();
    match name {
        "default" => Some(DEFAULT.get_or_init(|| format!("{CORE_NULL}{SUPPLEMENTARY}")).as_str()),
        "extended" => Some(
            EXTENDED
                .get_or_init(|| format!("{CORE_NULL}{SUPPLEMENTARY}{SENSITIVITY}"))
                .as_str(),
        ),
        other => PRESETS.iter().find(|(n, _)| *n == other).map(|(_, t)| *t),
    }
}
