//! Fractional powers of `(I - H_ii)` through the symmetric similar form
//! `L^{-1} H_ii L = D~ Delta D~^T`, where `V_i = L L^T` and `D~ = L^{-1} D_i`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{PgeeError, Result};
use crate::gee::{ClusterQuantities, FitKernel};
use crate::scalar::Scalar;

/// `(I - H_ii)` counts as singular when `1 - lambda_max` falls below this.
pub const LEVERAGE_SINGULARITY: f64 = 1e-10;

/// Standardized cluster quantities with the eigendecomposition of the
/// symmetric hat block.
#[derive(Debug, Clone)]
pub struct StandardizedCluster<T: Scalar> {
    /// `L^{-1} D_i`.
    pub d: DMatrix<T>,
    /// `L^{-1} r_i`.
    pub r: DVector<T>,
    pub eigenvectors: DMatrix<T>,
    /// Eigenvalues of `D~ Delta D~^T`, the leverages of the cluster.
    pub eigenvalues: DVector<T>,
}

impl<T: Scalar> StandardizedCluster<T> {
    fn new(c: &ClusterQuantities<T>, delta: &DMatrix<T>) -> Self {
        let d = c.standardize(&c.d);
        let r = c.standardize_vec(&c.r);
        let h = &d * delta * d.transpose();
        let h = (&h + h.transpose()) * T::lit(0.5);
        let eig = SymmetricEigen::new(h);
        Self {
            d,
            r,
            eigenvectors: eig.eigenvectors,
            eigenvalues: eig.eigenvalues,
        }
    }

    pub fn max_leverage(&self) -> T {
        self.eigenvalues
            .iter()
            .fold(T::zero(), |acc, &v| if v > acc { v } else { acc })
    }

    fn spectral_weights(&self, c: T) -> DVector<T> {
        self.eigenvalues.map(|l| {
            let l = if l < T::zero() { T::zero() } else { l };
            (T::one() - l).powf(-c)
        })
    }

    /// `(I - H~)^{-c} v` for a standardized vector `v`.
    pub fn apply_power(&self, c: T, v: &DVector<T>) -> DVector<T> {
        let q = &self.eigenvectors;
        let coeffs = (q.transpose() * v).component_mul(&self.spectral_weights(c));
        q * coeffs
    }

    /// `(I - H~)^{-c}` as a dense matrix.
    pub fn power_matrix(&self, c: T) -> DMatrix<T> {
        let q = &self.eigenvectors;
        let weights = self.spectral_weights(c);
        let scaled = DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| q[(i, j)] * weights[j]);
        scaled * q.transpose()
    }
}

/// Per-cluster standardized forms, checked for invertibility of `I - H_ii`.
#[derive(Debug, Clone)]
pub struct LeverageCache<T: Scalar> {
    pub clusters: Vec<StandardizedCluster<T>>,
}

impl<T: Scalar> LeverageCache<T> {
    pub fn new(kernel: &FitKernel<T>) -> Result<Self> {
        let tol = T::lit(LEVERAGE_SINGULARITY);
        let mut clusters = Vec::with_capacity(kernel.n_clusters());
        for (c, id) in kernel.clusters().iter().zip(kernel.ids()) {
            let s = StandardizedCluster::new(c, kernel.delta());
            if T::one() - s.max_leverage() < tol {
                return Err(PgeeError::SingularLeverage(id.clone()));
            }
            clusters.push(s);
        }
        Ok(Self { clusters })
    }

    /// Corrected score contributions `D^T V^{-1} (I - H_ii)^{-c} r_i`.
    pub fn scores(&self, kernel: &FitKernel<T>, c: T) -> Vec<DVector<T>> {
        if c == T::zero() {
            return kernel.clusters().iter().map(|q| q.score.clone()).collect();
        }
        self.clusters
            .iter()
            .map(|s| s.d.transpose() * s.apply_power(c, &s.r))
            .collect()
    }

    /// Unstandardized corrected residuals `(I - H_ii)^{-c} r_i = L (I - H~)^{-c} L^{-1} r_i`.
    pub fn residuals(&self, kernel: &FitKernel<T>, c: T) -> Vec<DVector<T>> {
        if c == T::zero() {
            return kernel.clusters().iter().map(|q| q.r.clone()).collect();
        }
        self.clusters
            .iter()
            .zip(kernel.clusters())
            .map(|(s, q)| &q.v_chol * s.apply_power(c, &s.r))
            .collect()
    }
}

/// Corrected score contributions `f_i(c) = D_i^T V_i^{-1} (I - H_ii)^{-c} r_i`.
///
/// `c = 0` returns the ordinary score contributions without touching the
/// hat blocks.
pub fn leverage_scores<T: Scalar>(kernel: &FitKernel<T>, c: T) -> Result<Vec<DVector<T>>> {
    if c < T::zero() || c > T::one() {
        return Err(PgeeError::InvalidOption(format!(
            "leverage exponent {c} outside [0, 1]"
        )));
    }
    if c == T::zero() {
        return Ok(kernel.clusters().iter().map(|q| q.score.clone()).collect());
    }
    Ok(LeverageCache::new(kernel)?.scores(kernel, c))
}
