//! Per-cluster marginal-model quantities, the sensitivity matrix, hat blocks
//! and the Firth-type penalty.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{PgeeError, Result};
use crate::model::{Cluster, CorrStructure, LongitudinalDataset};
use crate::scalar::Scalar;

/// Largest admissible condition number of `I0`.
pub const MAX_INFORMATION_CONDITION: f64 = 1e12;

/// Linear predictors are clamped to this magnitude before exponentiation.
pub const ETA_CLAMP: f64 = 700.0;

/// Quantities of one cluster at a given `(beta, alpha, phi)`.
#[derive(Debug, Clone)]
pub struct ClusterQuantities<T: Scalar> {
    /// Marginal means `mu_ij`.
    pub mu: DVector<T>,
    /// Diagonal of `W = diag{mu (1 - mu)}`.
    pub w: DVector<T>,
    /// `D = W X`, `n_i x p`.
    pub d: DMatrix<T>,
    /// Working covariance `phi W^{1/2} R W^{1/2}`.
    pub v: DMatrix<T>,
    pub v_inv: DMatrix<T>,
    /// Lower-triangular `L` with `V = L L^T`.
    pub v_chol: DMatrix<T>,
    /// Residual `y - mu`.
    pub r: DVector<T>,
    /// `A = D^T V^{-1} D`.
    pub a: DMatrix<T>,
    /// Score contribution `d = D^T V^{-1} r`.
    pub score: DVector<T>,
}

impl<T: Scalar> ClusterQuantities<T> {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// `V^{-1} D`, reused by several estimators.
    pub fn v_inv_d(&self) -> DMatrix<T> {
        &self.v_inv * &self.d
    }

    /// Standardizes a vector or matrix by `L^{-1}`.
    pub fn standardize(&self, m: &DMatrix<T>) -> DMatrix<T> {
        self.v_chol
            .solve_lower_triangular(m)
            .expect("Cholesky factor has a non-zero diagonal")
    }

    pub fn standardize_vec(&self, v: &DVector<T>) -> DVector<T> {
        self.v_chol
            .solve_lower_triangular(v)
            .expect("Cholesky factor has a non-zero diagonal")
    }
}

#[inline]
fn logistic<T: Scalar>(eta: T) -> T {
    if eta >= T::zero() {
        T::one() / (T::one() + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (T::one() + e)
    }
}

/// Mean, variance and working-covariance quantities for one cluster.
pub fn cluster_quantities<T: Scalar>(
    beta: &DVector<T>,
    structure: CorrStructure,
    alpha: T,
    phi: T,
    cluster: &Cluster<T>,
) -> Result<ClusterQuantities<T>> {
    let n = cluster.len();
    let x = cluster.x();
    if !(phi > T::zero()) {
        return Err(PgeeError::InvalidOption(format!(
            "dispersion must be positive, got {phi}"
        )));
    }
    if !structure.is_admissible(alpha.to_f64_lossy(), n) {
        return Err(PgeeError::InadmissibleAlpha(format!(
            "alpha = {alpha} for {structure} with n_i = {n}"
        )));
    }

    let eta = x * beta;
    let clamp = T::lit(ETA_CLAMP);
    let floor = T::probability_floor();
    let ceil = T::one() - floor;
    let mut mu = DVector::zeros(n);
    for j in 0..n {
        let e = eta[j];
        if !e.is_finite_value() {
            return Err(PgeeError::NumericOverflow(cluster.id().to_owned()));
        }
        let m = logistic(e.clamp(-clamp, clamp));
        mu[j] = m.clamp(floor, ceil);
    }
    let w = mu.map(|m| m * (T::one() - m));
    let sqrt_w = w.map(|v| v.sqrt());

    let r_corr = structure.matrix(alpha, n);
    let chol_r = Cholesky::new(r_corr.clone()).ok_or_else(|| PgeeError::SingularV(cluster.id().to_owned()))?;
    let r_inv = chol_r.inverse();
    let l_r = chol_r.l();

    let sqrt_phi = phi.sqrt();
    let v = DMatrix::from_fn(n, n, |i, j| phi * sqrt_w[i] * r_corr[(i, j)] * sqrt_w[j]);
    let v_inv = DMatrix::from_fn(n, n, |i, j| r_inv[(i, j)] / (phi * sqrt_w[i] * sqrt_w[j]));
    let v_chol = DMatrix::from_fn(n, n, |i, j| sqrt_phi * sqrt_w[i] * l_r[(i, j)]);

    let mut d = x.clone();
    for (j, mut row) in d.row_iter_mut().enumerate() {
        row *= w[j];
    }
    let r = cluster.y() - &mu;
    let vid = &v_inv * &d;
    let a = symmetrize(&(d.transpose() * &vid));
    let score = vid.transpose() * &r;

    Ok(ClusterQuantities {
        mu,
        w,
        d,
        v,
        v_inv,
        v_chol,
        r,
        a,
        score,
    })
}

pub(crate) fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = T::lit(0.5);
    (m + m.transpose()) * half
}

/// Sensitivity matrix, its inverse, and all cluster quantities at one
/// parameter value.
#[derive(Debug, Clone)]
pub struct FitKernel<T: Scalar> {
    beta: DVector<T>,
    structure: CorrStructure,
    alpha: T,
    phi: T,
    ids: Vec<String>,
    clusters: Vec<ClusterQuantities<T>>,
    i0: DMatrix<T>,
    delta: DMatrix<T>,
}

/// Condition number of a symmetric matrix, `inf` when not positive definite.
pub fn spd_condition<T: Scalar>(m: &DMatrix<T>) -> f64 {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.iter().fold(T::zero(), |acc, &v| if v > acc { v } else { acc });
    let min = eig.iter().fold(max, |acc, &v| if v < acc { v } else { acc });
    if !(min > T::zero()) {
        return f64::INFINITY;
    }
    (max / min).to_f64_lossy()
}

/// Assembles `I0 = sum A_i` and `Delta = I0^{-1}` with fixed cluster order.
pub fn assemble_kernel<T: Scalar>(
    beta: &DVector<T>,
    structure: CorrStructure,
    alpha: T,
    phi: T,
    data: &LongitudinalDataset<T>,
) -> Result<FitKernel<T>> {
    if beta.len() != data.p() {
        return Err(PgeeError::InvalidOption(format!(
            "beta has length {} but p = {}",
            beta.len(),
            data.p()
        )));
    }
    let clusters = data
        .clusters()
        .iter()
        .map(|c| cluster_quantities(beta, structure, alpha, phi, c))
        .collect::<Result<Vec<_>>>()?;
    let ids = data.clusters().iter().map(|c| c.id().to_owned()).collect();
    FitKernel::from_parts(beta.clone(), structure, alpha, phi, ids, clusters)
}

impl<T: Scalar> FitKernel<T> {
    fn from_parts(
        beta: DVector<T>,
        structure: CorrStructure,
        alpha: T,
        phi: T,
        ids: Vec<String>,
        clusters: Vec<ClusterQuantities<T>>,
    ) -> Result<Self> {
        let p = beta.len();
        let mut i0 = DMatrix::zeros(p, p);
        for c in &clusters {
            i0 += &c.a;
        }
        let i0 = symmetrize(&i0);
        let condition = spd_condition(&i0);
        if !condition.is_finite() || condition > MAX_INFORMATION_CONDITION {
            return Err(PgeeError::SingularInformation { condition });
        }
        let delta = Cholesky::new(i0.clone())
            .map(|c| symmetrize(&c.inverse()))
            .ok_or(PgeeError::SingularInformation { condition })?;
        Ok(Self {
            beta,
            structure,
            alpha,
            phi,
            ids,
            clusters,
            i0,
            delta,
        })
    }

    pub fn beta(&self) -> &DVector<T> {
        &self.beta
    }

    pub fn structure(&self) -> CorrStructure {
        self.structure
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn phi(&self) -> T {
        self.phi
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn clusters(&self) -> &[ClusterQuantities<T>] {
        &self.clusters
    }

    /// Sensitivity matrix `I0`.
    pub fn i0(&self) -> &DMatrix<T> {
        &self.i0
    }

    /// `Delta = I0^{-1}`.
    pub fn delta(&self) -> &DMatrix<T> {
        &self.delta
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(ClusterQuantities::len).sum()
    }

    pub fn is_balanced(&self) -> bool {
        let n0 = self.clusters.first().map(ClusterQuantities::len);
        self.clusters.iter().all(|c| Some(c.len()) == n0)
    }

    /// Hat block `H_ii = D_i Delta D_i^T V_i^{-1}`.
    pub fn hat_block(&self, i: usize) -> DMatrix<T> {
        self.cross_hat_block(i, i)
    }

    /// Cross-subject hat block `H_ij = D_i Delta D_j^T V_j^{-1}`.
    pub fn cross_hat_block(&self, i: usize, j: usize) -> DMatrix<T> {
        let ci = &self.clusters[i];
        let cj = &self.clusters[j];
        &ci.d * &self.delta * cj.v_inv_d().transpose()
    }

    /// `sum_i trace(H_ii)`, equal to `p` at any admissible point.
    pub fn hat_trace_sum(&self) -> T {
        self.clusters
            .iter()
            .map(|c| (&c.a * &self.delta).trace())
            .fold(T::zero(), |a, b| a + b)
    }

    /// Replaces residuals (and score contributions) while keeping every
    /// other quantity fixed. Used to evaluate the estimators on externally
    /// supplied residual vectors.
    pub fn with_residuals(&self, residuals: Vec<DVector<T>>) -> Result<Self> {
        if residuals.len() != self.clusters.len() {
            return Err(PgeeError::InvalidOption(format!(
                "expected {} residual vectors, got {}",
                self.clusters.len(),
                residuals.len()
            )));
        }
        let mut out = self.clone();
        for (c, r) in out.clusters.iter_mut().zip(residuals) {
            if r.len() != c.len() {
                return Err(PgeeError::InvalidOption("residual length mismatch".into()));
            }
            c.score = c.v_inv_d().transpose() * &r;
            c.r = r;
        }
        Ok(out)
    }
}

/// GEE score `U = sum_i D_i^T V_i^{-1} r_i`.
pub fn gee_score<T: Scalar>(kernel: &FitKernel<T>) -> DVector<T> {
    let mut u = DVector::zeros(kernel.p());
    for c in kernel.clusters() {
        u += &c.score;
    }
    u
}

/// Firth-type penalty `b_r = 1/2 trace(I0^{-1} dI0/dbeta_r)` evaluated from
/// an assembled kernel, with `alpha` and `phi` held fixed.
///
/// With `dW^{1/2}/dbeta_r = 1/2 W^{1/2} diag{(1 - 2 mu) x_r}` the trace
/// collapses to `b = 1/2 sum_i X_i^T q_i`, where
/// `q_ij = w_ij (1 - 2 mu_ij) [V_i^{-1} D_i Delta X_i^T]_jj`.
pub fn firth_penalty_from_kernel<T: Scalar>(kernel: &FitKernel<T>, data: &LongitudinalDataset<T>) -> DVector<T> {
    let p = kernel.p();
    let mut b = DVector::zeros(p);
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    for (c, cl) in kernel.clusters().iter().zip(data.clusters()) {
        let x = cl.x();
        let left = c.v_inv_d() * kernel.delta();
        for j in 0..c.len() {
            let diag = left.row(j).dot(&x.row(j));
            let q = c.w[j] * (T::one() - two * c.mu[j]) * diag;
            for r in 0..p {
                b[r] += half * q * x[(j, r)];
            }
        }
    }
    b
}

/// Analytic Firth penalty at `beta`.
pub fn firth_penalty<T: Scalar>(
    beta: &DVector<T>,
    structure: CorrStructure,
    alpha: T,
    phi: T,
    data: &LongitudinalDataset<T>,
) -> Result<DVector<T>> {
    let kernel = assemble_kernel(beta, structure, alpha, phi, data)?;
    Ok(firth_penalty_from_kernel(&kernel, data))
}

/// Finite-difference version of the penalty: `I0` is differentiated by
/// central differences with step `1e-5 max(1, |beta_r|)`.
pub fn firth_penalty_fd<T: Scalar>(
    beta: &DVector<T>,
    structure: CorrStructure,
    alpha: T,
    phi: T,
    data: &LongitudinalDataset<T>,
) -> Result<DVector<T>> {
    let kernel = assemble_kernel(beta, structure, alpha, phi, data)?;
    let p = beta.len();
    let half = T::lit(0.5);
    let mut b = DVector::zeros(p);
    for r in 0..p {
        let step = T::lit(1e-5) * T::one().max(beta[r].abs());
        let mut up = beta.clone();
        up[r] += step;
        let mut down = beta.clone();
        down[r] -= step;
        let i_up = assemble_kernel(&up, structure, alpha, phi, data)?.i0;
        let i_down = assemble_kernel(&down, structure, alpha, phi, data)?.i0;
        let di = (i_up - i_down) / (step + step);
        b[r] = half * (kernel.delta() * di).trace();
    }
    Ok(b)
}
