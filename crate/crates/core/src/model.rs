//! Domain types shared by the fitting, variance and simulation code.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{PgeeError, Result};
use crate::scalar::Scalar;

/// One subject: binary responses with their covariate rows.
///
/// The design matrix always carries the intercept in column 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster<T: Scalar> {
    id: String,
    y: DVector<T>,
    x: DMatrix<T>,
    time: Option<DVector<T>>,
}

impl<T: Scalar> Cluster<T> {
    pub fn new(id: impl Into<String>, y: DVector<T>, x: DMatrix<T>, time: Option<DVector<T>>) -> Result<Self> {
        let id = id.into();
        if y.len() < 2 {
            return Err(PgeeError::SingletonCluster(id));
        }
        if x.nrows() != y.len() {
            return Err(PgeeError::RaggedCovariates {
                expected: y.len(),
                found: x.nrows(),
                context: format!("design rows of cluster `{id}`"),
            });
        }
        if let Some(t) = &time {
            if t.len() != y.len() {
                return Err(PgeeError::RaggedCovariates {
                    expected: y.len(),
                    found: t.len(),
                    context: format!("time vector of cluster `{id}`"),
                });
            }
        }
        for (row, &v) in y.iter().enumerate() {
            if v != T::zero() && v != T::one() {
                return Err(PgeeError::NonBinaryOutcome {
                    cluster: id,
                    row,
                    value: v.to_string(),
                });
            }
        }
        for row in 0..x.nrows() {
            if x.row(row).iter().any(|v| !v.is_finite_value()) {
                return Err(PgeeError::NonFiniteCovariate { cluster: id, row });
            }
        }
        Ok(Self { id, y, x, time })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn y(&self) -> &DVector<T> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<T> {
        &self.x
    }

    pub fn time(&self) -> Option<&DVector<T>> {
        self.time.as_ref()
    }

    /// Number of repeated observations `n_i`.
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Number of design columns, intercept included.
    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }
}

/// An ordered collection of clusters sharing one covariate dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset<T: Scalar> {
    clusters: Vec<Cluster<T>>,
    p: usize,
    covariate_names: Vec<String>,
}

impl<T: Scalar> LongitudinalDataset<T> {
    /// Builds a dataset from already-constructed clusters.
    ///
    /// `covariate_names` labels every design column, intercept included.
    pub fn new(clusters: Vec<Cluster<T>>, covariate_names: Vec<String>) -> Result<Self> {
        let p = covariate_names.len();
        let mut seen = HashMap::with_capacity(clusters.len());
        for c in &clusters {
            if c.ncols() != p {
                return Err(PgeeError::RaggedCovariates {
                    expected: p,
                    found: c.ncols(),
                    context: format!("cluster `{}`", c.id()),
                });
            }
            if seen.insert(c.id().to_owned(), ()).is_some() {
                return Err(PgeeError::DuplicateCluster(c.id().to_owned()));
            }
        }
        if clusters.len() < p + 1 {
            return Err(PgeeError::TooFewClusters {
                clusters: clusters.len(),
                required: p + 1,
            });
        }
        Ok(Self {
            clusters,
            p,
            covariate_names,
        })
    }

    pub fn clusters(&self) -> &[Cluster<T>] {
        &self.clusters
    }

    /// Number of clusters `N`.
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Covariate dimension `p`, intercept included.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Total number of observations `n*`.
    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(Cluster::len).sum()
    }

    pub fn max_cluster_size(&self) -> usize {
        self.clusters.iter().map(Cluster::len).max().unwrap_or(0)
    }

    /// True when every cluster has the same number of observations.
    pub fn is_balanced(&self) -> bool {
        let n0 = self.clusters.first().map(Cluster::len);
        self.clusters.iter().all(|c| Some(c.len()) == n0)
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Returns a copy keeping only the listed design columns.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        for &c in columns {
            if c >= self.p {
                return Err(PgeeError::InvalidOption(format!(
                    "column index {c} out of range for p = {}",
                    self.p
                )));
            }
        }
        let clusters = self
            .clusters
            .iter()
            .map(|c| {
                let x = c.x.select_columns(columns);
                Cluster::new(c.id.clone(), c.y.clone(), x, c.time.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let names = columns.iter().map(|&c| self.covariate_names[c].clone()).collect();
        Self::new(clusters, names)
    }

    /// Reorders clusters by the given permutation of indices.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            clusters: order.iter().map(|&i| self.clusters[i].clone()).collect(),
            p: self.p,
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// One row of long-format input before grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub cluster: String,
    pub y: f64,
    pub covariates: Vec<f64>,
}

/// Long-format records plus column metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawTable {
    /// Names of the covariate columns as given (intercept excluded).
    pub covariate_names: Vec<String>,
    /// Index into `covariate_names` of the time column, if any.
    pub time_column: Option<usize>,
    pub records: Vec<RawRecord>,
}

/// Name given to the synthesized intercept column.
pub const INTERCEPT_NAME: &str = "(Intercept)";

/// Groups long-format rows into clusters (first-appearance order) and
/// enforces the dataset invariants.
pub fn validate_dataset<T: Scalar>(raw: &RawTable) -> Result<LongitudinalDataset<T>> {
    let k = raw.covariate_names.len();
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, rec) in raw.records.iter().enumerate() {
        if rec.covariates.len() != k {
            return Err(PgeeError::RaggedCovariates {
                expected: k,
                found: rec.covariates.len(),
                context: format!("row {}", i + 1),
            });
        }
        if rec.y != 0.0 && rec.y != 1.0 {
            return Err(PgeeError::NonBinaryOutcome {
                cluster: rec.cluster.clone(),
                row: i + 1,
                value: rec.y.to_string(),
            });
        }
        if rec.covariates.iter().any(|v| !v.is_finite()) {
            return Err(PgeeError::NonFiniteCovariate {
                cluster: rec.cluster.clone(),
                row: i + 1,
            });
        }
        rows.entry(rec.cluster.clone())
            .or_insert_with(|| {
                order.push(rec.cluster.clone());
                Vec::new()
            })
            .push(i);
    }

    let mut clusters = Vec::with_capacity(order.len());
    for id in order {
        let idx = &rows[&id];
        let n = idx.len();
        if n < 2 {
            return Err(PgeeError::SingletonCluster(id));
        }
        let y = DVector::from_iterator(n, idx.iter().map(|&i| T::lit(raw.records[i].y)));
        let x = DMatrix::from_fn(n, k + 1, |r, c| {
            if c == 0 {
                T::one()
            } else {
                T::lit(raw.records[idx[r]].covariates[c - 1])
            }
        });
        let time = raw
            .time_column
            .map(|tc| DVector::from_iterator(n, idx.iter().map(|&i| T::lit(raw.records[i].covariates[tc]))));
        clusters.push(Cluster::new(id, y, x, time)?);
    }

    let mut names = Vec::with_capacity(k + 1);
    names.push(INTERCEPT_NAME.to_owned());
    names.extend(raw.covariate_names.iter().cloned());
    LongitudinalDataset::new(clusters, names)
}

/// Within-cluster working correlation family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorrStructure {
    Independence,
    Exchangeable,
    Ar1,
}

impl CorrStructure {
    pub const ALL: [CorrStructure; 3] = [
        CorrStructure::Independence,
        CorrStructure::Exchangeable,
        CorrStructure::Ar1,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            CorrStructure::Independence => "ind",
            CorrStructure::Exchangeable => "exch",
            CorrStructure::Ar1 => "ar1",
        }
    }

    /// Open interval of admissible correlation parameters for clusters of
    /// size at most `n_max`.
    pub fn admissible_range(self, n_max: usize) -> (f64, f64) {
        match self {
            CorrStructure::Independence => (0.0, 0.0),
            CorrStructure::Exchangeable => {
                let lo = if n_max > 1 { -1.0 / (n_max as f64 - 1.0) } else { -1.0 };
                (lo, 1.0)
            }
            CorrStructure::Ar1 => (-1.0, 1.0),
        }
    }

    pub fn is_admissible(self, alpha: f64, n_max: usize) -> bool {
        match self {
            CorrStructure::Independence => true,
            _ => {
                let (lo, hi) = self.admissible_range(n_max);
                alpha > lo && alpha < hi
            }
        }
    }

    /// Working correlation matrix `R(alpha)` of dimension `n`.
    pub fn matrix<T: Scalar>(self, alpha: T, n: usize) -> DMatrix<T> {
        match self {
            CorrStructure::Independence => DMatrix::identity(n, n),
            CorrStructure::Exchangeable => DMatrix::from_fn(n, n, |i, j| if i == j { T::one() } else { alpha }),
            CorrStructure::Ar1 => DMatrix::from_fn(n, n, |i, j| {
                let lag = i.abs_diff(j);
                let mut v = T::one();
                for _ in 0..lag {
                    v *= alpha;
                }
                v
            }),
        }
    }
}

impl fmt::Display for CorrStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CorrStructure {
    type Err = PgeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ind" | "indep" | "independence" => Ok(CorrStructure::Independence),
            "exch" | "exchangeable" | "cs" => Ok(CorrStructure::Exchangeable),
            "ar1" | "ar(1)" => Ok(CorrStructure::Ar1),
            other => Err(PgeeError::InvalidOption(format!(
                "unknown correlation structure `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaMode<T> {
    Fixed(T),
    Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DispersionMode<T> {
    Fixed(T),
    PearsonPlugin,
}

/// Working covariance specification `V_i = phi * W^{1/2} R(alpha) W^{1/2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkingModel<T> {
    pub structure: CorrStructure,
    pub alpha: AlphaMode<T>,
    pub dispersion: DispersionMode<T>,
}

impl<T: Scalar> WorkingModel<T> {
    /// Estimated correlation, unit dispersion.
    pub fn new(structure: CorrStructure) -> Self {
        let alpha = match structure {
            CorrStructure::Independence => AlphaMode::Fixed(T::zero()),
            _ => AlphaMode::Estimate,
        };
        Self {
            structure,
            alpha,
            dispersion: DispersionMode::Fixed(T::one()),
        }
    }

    pub fn with_alpha(mut self, alpha: AlphaMode<T>) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_dispersion(mut self, dispersion: DispersionMode<T>) -> Self {
        self.dispersion = dispersion;
        self
    }

    /// Checks fixed parameters against the admissible region.
    pub fn validate(&self, n_max: usize) -> Result<()> {
        if let AlphaMode::Fixed(a) = self.alpha {
            let a = a.to_f64_lossy();
            if self.structure == CorrStructure::Independence && a != 0.0 {
                return Err(PgeeError::InadmissibleAlpha("independence forces alpha = 0".into()));
            }
            if !self.structure.is_admissible(a, n_max) {
                let (lo, hi) = self.structure.admissible_range(n_max);
                return Err(PgeeError::InadmissibleAlpha(format!(
                    "alpha = {a} outside ({lo}, {hi}) for {}",
                    self.structure
                )));
            }
        }
        if let DispersionMode::Fixed(phi) = self.dispersion {
            if !(phi > T::zero()) || !phi.is_finite_value() {
                return Err(PgeeError::InvalidOption(format!(
                    "dispersion must be positive, got {phi}"
                )));
            }
        }
        Ok(())
    }

    /// Starting correlation parameter for the iteration.
    pub fn initial_alpha(&self) -> T {
        match (self.structure, self.alpha) {
            (CorrStructure::Independence, _) => T::zero(),
            (_, AlphaMode::Fixed(a)) => a,
            (_, AlphaMode::Estimate) => T::zero(),
        }
    }

    pub fn initial_phi(&self) -> T {
        match self.dispersion {
            DispersionMode::Fixed(phi) => phi,
            DispersionMode::PearsonPlugin => T::one(),
        }
    }
}

/// The fourteen sandwich covariance estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorId {
    Lz,
    Df,
    Kc,
    Md,
    Fg,
    Mbn,
    Pan,
    Gst,
    Wl,
    Wb,
    Rs,
    Fw,
    Fz,
    Ar,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 14] = [
        EstimatorId::Lz,
        EstimatorId::Df,
        EstimatorId::Kc,
        EstimatorId::Md,
        EstimatorId::Fg,
        EstimatorId::Mbn,
        EstimatorId::Pan,
        EstimatorId::Gst,
        EstimatorId::Wl,
        EstimatorId::Wb,
        EstimatorId::Rs,
        EstimatorId::Fw,
        EstimatorId::Fz,
        EstimatorId::Ar,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            EstimatorId::Lz => "LZ",
            EstimatorId::Df => "DF",
            EstimatorId::Kc => "KC",
            EstimatorId::Md => "MD",
            EstimatorId::Fg => "FG",
            EstimatorId::Mbn => "MBN",
            EstimatorId::Pan => "PAN",
            EstimatorId::Gst => "GST",
            EstimatorId::Wl => "WL",
            EstimatorId::Wb => "WB",
            EstimatorId::Rs => "RS",
            EstimatorId::Fw => "FW",
            EstimatorId::Fz => "FZ",
            EstimatorId::Ar => "AR",
        }
    }

    /// Estimators that pool residual outer products across clusters and
    /// therefore need equal cluster sizes.
    pub fn requires_balance(self) -> bool {
        matches!(
            self,
            EstimatorId::Pan | EstimatorId::Gst | EstimatorId::Wl | EstimatorId::Wb | EstimatorId::Rs
        )
    }

    /// Estimators that invert `(I - H_ii)`.
    pub fn requires_leverage_inverse(self) -> bool {
        matches!(
            self,
            EstimatorId::Kc
                | EstimatorId::Md
                | EstimatorId::Wl
                | EstimatorId::Wb
                | EstimatorId::Fw
                | EstimatorId::Fz
                | EstimatorId::Ar
        )
    }

    /// Estimators whose middle matrix may legitimately be indefinite.
    pub fn may_be_indefinite(self) -> bool {
        matches!(self, EstimatorId::Fw | EstimatorId::Fz)
    }

    /// Parses a comma-separated list, or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<EstimatorId>> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for EstimatorId {
    type Err = PgeeError;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        Self::ALL
            .iter()
            .copied()
            .find(|id| id.tag() == upper)
            .ok_or_else(|| PgeeError::UnknownEstimator(s.trim().to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(rows: &[(&str, f64, f64)]) -> RawTable {
        RawTable {
            covariate_names: vec!["x1".into()],
            time_column: None,
            records: rows
                .iter()
                .map(|&(c, y, x)| RawRecord {
                    cluster: c.into(),
                    y,
                    covariates: vec![x],
                })
                .collect(),
        }
    }

    #[test]
    fn groups_ten_clusters_of_seven() {
        let mut table = RawTable {
            covariate_names: vec!["trt".into(), "t".into()],
            time_column: Some(1),
            records: Vec::new(),
        };
        for i in 0..10 {
            for j in 0..7 {
                table.records.push(RawRecord {
                    cluster: format!("s{i}"),
                    y: ((i + j) % 3 == 0) as u8 as f64,
                    covariates: vec![(i % 2) as f64, j as f64 * 0.5],
                });
            }
        }
        let ds = validate_dataset::<f64>(&table).unwrap();
        assert_eq!(ds.n_clusters(), 10);
        assert_eq!(ds.p(), 3);
        assert!(ds.clusters().iter().all(|c| c.len() == 7));
        assert!(ds.is_balanced());
        assert_eq!(ds.covariate_names()[0], INTERCEPT_NAME);
        let c3 = &ds.clusters()[3];
        assert_eq!(c3.id(), "s3");
        assert_eq!(c3.x()[(0, 0)], 1.0);
        assert_eq!(c3.time().unwrap()[2], 1.0);
    }

    #[test]
    fn singleton_cluster_rejected() {
        let t = raw(&[
            ("a", 0.0, 1.0),
            ("a", 1.0, 2.0),
            ("b", 0.0, 1.0),
            ("c", 1.0, 0.0),
            ("c", 0.0, 1.0),
            ("d", 1.0, 0.0),
            ("d", 0.0, 1.0),
        ]);
        match validate_dataset::<f64>(&t) {
            Err(PgeeError::SingletonCluster(id)) => assert_eq!(id, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_binary_outcome_rejected() {
        let t = raw(&[("a", 0.0, 1.0), ("a", 2.0, 2.0)]);
        assert!(matches!(
            validate_dataset::<f64>(&t),
            Err(PgeeError::NonBinaryOutcome { .. })
        ));
    }

    #[test]
    fn too_few_clusters() {
        let t = raw(&[("a", 0.0, 1.0), ("a", 1.0, 2.0), ("b", 0.0, 1.0), ("b", 1.0, 0.0)]);
        assert!(matches!(
            validate_dataset::<f64>(&t),
            Err(PgeeError::TooFewClusters {
                clusters: 2,
                required: 3
            })
        ));
    }

    #[test]
    fn ragged_row_rejected() {
        let mut t = raw(&[("a", 0.0, 1.0), ("a", 1.0, 2.0)]);
        t.records[1].covariates.push(3.0);
        assert!(matches!(
            validate_dataset::<f64>(&t),
            Err(PgeeError::RaggedCovariates { .. })
        ));
    }

    #[test]
    fn interleaved_rows_keep_first_appearance_order() {
        let t = raw(&[
            ("b", 0.0, 1.0),
            ("a", 1.0, 2.0),
            ("b", 1.0, 3.0),
            ("a", 0.0, 4.0),
            ("c", 0.0, 5.0),
            ("c", 1.0, 6.0),
        ]);
        let ds = validate_dataset::<f64>(&t).unwrap();
        let ids: Vec<_> = ds.clusters().iter().map(|c| c.id()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert_eq!(ds.clusters()[0].x()[(1, 1)], 3.0);
    }

    #[test]
    fn estimator_tags_round_trip() {
        for id in EstimatorId::ALL {
            assert_eq!(id.tag().parse::<EstimatorId>().unwrap(), id);
        }
        assert!(matches!(
            "XX".parse::<EstimatorId>(),
            Err(PgeeError::UnknownEstimator(_))
        ));
        assert_eq!(
            EstimatorId::parse_list("lz, ar").unwrap(),
            vec![EstimatorId::Lz, EstimatorId::Ar]
        );
        assert_eq!(EstimatorId::parse_list("all").unwrap().len(), 14);
    }

    #[test]
    fn alpha_admissibility() {
        let wm = WorkingModel::<f64>::new(CorrStructure::Exchangeable).with_alpha(AlphaMode::Fixed(-0.4));
        assert!(wm.validate(4).is_err());
        assert!(wm.validate(3).is_ok());
        let ar = WorkingModel::<f64>::new(CorrStructure::Ar1).with_alpha(AlphaMode::Fixed(1.0));
        assert!(ar.validate(4).is_err());
        let ind = WorkingModel::<f64>::new(CorrStructure::Independence).with_alpha(AlphaMode::Fixed(0.2));
        assert!(ind.validate(4).is_err());
    }

    #[test]
    fn ar1_matrix_powers() {
        let r = CorrStructure::Ar1.matrix(0.5_f64, 4);
        assert_eq!(r[(0, 3)], 0.125);
        assert_eq!(r[(2, 1)], 0.5);
        let e = CorrStructure::Exchangeable.matrix(0.3_f64, 3);
        assert_eq!(e[(0, 2)], 0.3);
        assert_eq!(e[(1, 1)], 1.0);
    }
}
