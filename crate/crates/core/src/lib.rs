//! Penalized GEE for clustered binary outcomes with a catalog of
//! small-sample sandwich variance estimators.
//!
//! Numerical routines are generic over [`Scalar`] (`f32` or `f64`). The
//! aliases at the crate root fix the scalar to `f64`.

pub mod csvio;
pub mod error;
pub mod fit;
pub mod gee;
pub mod model;
pub mod scalar;
pub mod varest;

pub use error::{PgeeError, Result};
pub use fit::{fit, DivergenceReason, FitOptions, FitWarning, PgeeFit};
pub use gee::{assemble_kernel, firth_penalty, gee_score, ClusterQuantities, FitKernel};
pub use model::{
    AlphaMode, Cluster, CorrStructure, DispersionMode, EstimatorId, LongitudinalDataset, RawRecord, RawTable,
    WorkingModel, INTERCEPT_NAME,
};
pub use scalar::Scalar;
pub use varest::{
    estimate_all, estimate_variance, overcorrection_diagnostic, wald_test, EstimatorOptions, IncomputableReason,
    OvercorrectionDiagnostic, VarianceEstimate, WaldResult,
};

pub type Dataset = LongitudinalDataset<f64>;
pub type Fit = PgeeFit<f64>;
pub type Kernel = FitKernel<f64>;
pub type Model = WorkingModel<f64>;
pub type Variance = VarianceEstimate<f64>;
