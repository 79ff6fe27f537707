use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgeeError {
    #[error("non-binary outcome {value} in cluster `{cluster}` (row {row})")]
    NonBinaryOutcome { cluster: String, row: usize, value: String },

    #[error("cluster `{0}` has a single observation; at least two are required")]
    SingletonCluster(String),

    #[error("ragged covariates: expected {expected} columns, found {found} ({context})")]
    RaggedCovariates {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("too few clusters: N = {clusters} but at least p + 1 = {required} are needed")]
    TooFewClusters { clusters: usize, required: usize },

    #[error("duplicate cluster id `{0}`")]
    DuplicateCluster(String),

    #[error("non-finite covariate in cluster `{cluster}` (row {row})")]
    NonFiniteCovariate { cluster: String, row: usize },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("inadmissible working correlation: {0}")]
    InadmissibleAlpha(String),

    #[error("invalid option: {0}")]
    InvalidOption(String),

    #[error("non-finite linear predictor in cluster `{0}`")]
    NumericOverflow(String),

    #[error("working covariance of cluster `{0}` is not positive definite")]
    SingularV(String),

    #[error("sensitivity matrix is singular or ill-conditioned (condition number {condition:e})")]
    SingularInformation { condition: f64 },

    #[error("(I - H_ii) is numerically singular for cluster `{0}`")]
    SingularLeverage(String),

    #[error("standard error must be positive and finite")]
    ZeroSe,

    #[error("unknown estimator tag `{0}`")]
    UnknownEstimator(String),
}

pub type Result<T> = std::result::Result<T, PgeeError>;
