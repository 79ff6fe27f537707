//! Leverage overcorrection matrix `B_lev = sum_i A_i (I0 - A_i)^{-1} A_i`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{PgeeError, Result};
use crate::gee::{spd_condition, symmetrize, FitKernel};
use crate::scalar::Scalar;

/// `I0 - A_i` with a larger condition number is treated as singular.
pub const MAX_COMPLEMENT_CONDITION: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct OvercorrectionDiagnostic<T: Scalar> {
    pub b_lev: DMatrix<T>,
    /// `[B_lev]_ss / [I0]_ss`.
    pub rho: DVector<T>,
    /// Eigenvalues of `I0^{-1} B_lev`, ascending.
    pub eigenvalues: DVector<T>,
}

impl<T: Scalar> OvercorrectionDiagnostic<T> {
    /// Largest eigenvalue of `I + I0^{-1} B_lev`, the worst-direction
    /// inflation of the expected Mancl-DeRouen middle matrix.
    pub fn max_inflation(&self) -> T {
        T::one() + self.eigenvalues.iter().copied().fold(T::zero(), |a, b| a.max(b))
    }
}

pub fn overcorrection_diagnostic<T: Scalar>(kernel: &FitKernel<T>) -> Result<OvercorrectionDiagnostic<T>> {
    let i0 = kernel.i0();
    let p = kernel.p();
    let mut b = DMatrix::zeros(p, p);
    for (c, id) in kernel.clusters().iter().zip(kernel.ids()) {
        let complement = symmetrize(&(i0 - &c.a));
        let cond = spd_condition(&complement);
        if !cond.is_finite() || cond > MAX_COMPLEMENT_CONDITION {
            return Err(PgeeError::SingularLeverage(id.clone()));
        }
        let chol = Cholesky::new(complement).ok_or_else(|| PgeeError::SingularLeverage(id.clone()))?;
        b += &c.a * chol.solve(&c.a);
    }
    let b_lev = symmetrize(&b);
    let rho = DVector::from_fn(p, |s, _| b_lev[(s, s)] / i0[(s, s)]);

    // I0^{-1} B is similar to C^{-1} B C^{-T} with I0 = C C^T.
    let c = Cholesky::new(i0.clone())
        .ok_or(PgeeError::SingularInformation {
            condition: f64::INFINITY,
        })?
        .l();
    let left = c
        .solve_lower_triangular(&b_lev)
        .expect("Cholesky factor has a non-zero diagonal");
    let sym = c
        .solve_lower_triangular(&left.transpose())
        .expect("Cholesky factor has a non-zero diagonal");
    let mut eigenvalues = SymmetricEigen::new(symmetrize(&sym)).eigenvalues;
    eigenvalues
        .as_mut_slice()
        .sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));

    Ok(OvercorrectionDiagnostic {
        b_lev,
        rho,
        eigenvalues,
    })
}
