//! Sandwich covariance estimators, the leverage overcorrection diagnostic
//! and Wald inference.
//!
//! Every estimator has the form `Delta M Delta` for some middle matrix `M`,
//! except MBN and RS which add a multiple of `Delta`.

mod diagnostic;
mod leverage;
mod wald;

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::PgeeError;
use crate::gee::{symmetrize, FitKernel};
use crate::model::EstimatorId;
use crate::scalar::Scalar;

pub use diagnostic::{overcorrection_diagnostic, OvercorrectionDiagnostic, MAX_COMPLEMENT_CONDITION};
pub use leverage::{leverage_scores, LeverageCache, StandardizedCluster, LEVERAGE_SINGULARITY};
pub use wald::{t_critical, wald_test, WaldResult};

/// Relative tolerance below which a negative eigenvalue counts as roundoff.
pub const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOptions {
    /// Clipping threshold `b` for the Fay-Graubard leverages.
    pub fg_clip: f64,
    /// Leverage exponent inside the Westgate-Burchett pooled correlation.
    pub wb_exponent: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            fg_clip: 0.75,
            wb_exponent: 0.5,
        }
    }
}

impl EstimatorOptions {
    pub fn validate(&self) -> crate::Result<()> {
        if !(0.0..1.0).contains(&self.fg_clip) {
            return Err(PgeeError::InvalidOption(format!(
                "FG clip threshold {} outside [0, 1)",
                self.fg_clip
            )));
        }
        if !(0.0..=1.0).contains(&self.wb_exponent) {
            return Err(PgeeError::InvalidOption(format!(
                "WB exponent {} outside [0, 1]",
                self.wb_exponent
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IncomputableReason {
    UnbalancedPooling,
    SingularLeverage,
    /// A diagonal entry of an indefinite estimate is negative; only the
    /// affected standard errors are missing.
    NegativeVariance,
}

impl fmt::Display for IncomputableReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IncomputableReason::UnbalancedPooling => "unbalanced-pooling",
            IncomputableReason::SingularLeverage => "singular-leverage",
            IncomputableReason::NegativeVariance => "negative-variance",
        })
    }
}

#[derive(Debug, Clone)]
pub struct VarianceEstimate<T: Scalar> {
    pub id: EstimatorId,
    /// `p x p` covariance estimate; empty when nothing could be computed.
    pub v: DMatrix<T>,
    /// Square roots of the diagonal; `NaN` where unavailable.
    pub se: DVector<T>,
    pub computable: bool,
    pub incomputable_reason: Option<IncomputableReason>,
}

impl<T: Scalar> VarianceEstimate<T> {
    fn from_matrix(id: EstimatorId, v: DMatrix<T>) -> Self {
        let v = symmetrize(&v);
        let se = DVector::from_fn(v.nrows(), |s, _| {
            let d = v[(s, s)];
            if d >= T::zero() {
                d.sqrt()
            } else {
                T::lit(f64::NAN)
            }
        });
        let ok = se.iter().all(|x| x.is_finite_value());
        Self {
            id,
            v,
            se,
            computable: ok,
            incomputable_reason: (!ok).then_some(IncomputableReason::NegativeVariance),
        }
    }

    fn incomputable(id: EstimatorId, p: usize, reason: IncomputableReason) -> Self {
        Self {
            id,
            v: DMatrix::from_element(p, p, T::lit(f64::NAN)),
            se: DVector::from_element(p, T::lit(f64::NAN)),
            computable: false,
            incomputable_reason: Some(reason),
        }
    }

    /// Standard error of coefficient `s` when finite and positive.
    pub fn se_of(&self, s: usize) -> Option<T> {
        let v = self.se[s];
        (v.is_finite_value() && v > T::zero()).then_some(v)
    }
}

fn sandwich<T: Scalar>(kernel: &FitKernel<T>, middle: &DMatrix<T>) -> DMatrix<T> {
    let delta = kernel.delta();
    delta * middle * delta
}

fn outer_sum<T: Scalar>(vs: &[DVector<T>], p: usize) -> DMatrix<T> {
    let mut m = DMatrix::zeros(p, p);
    for v in vs {
        m.ger(T::one(), v, v, T::one());
    }
    m
}

fn centered_outer_sum<T: Scalar>(vs: &[DVector<T>], p: usize) -> DMatrix<T> {
    let n = T::from_usize_lossy(vs.len());
    let mut mean = DVector::zeros(p);
    for v in vs {
        mean += v;
    }
    mean /= n;
    let centered: Vec<_> = vs.iter().map(|v| v - &mean).collect();
    outer_sum(&centered, p)
}

/// `c_N = (n* - 1)/(n* - p) * N/(N - 1)`.
pub fn morel_factor<T: Scalar>(kernel: &FitKernel<T>) -> T {
    let n_star = kernel.n_obs() as f64;
    let n = kernel.n_clusters() as f64;
    let p = kernel.p() as f64;
    T::lit((n_star - 1.0) / (n_star - p) * n / (n - 1.0))
}

/// `delta_n = min(0.5, p / (N - p))`.
pub fn morel_shrinkage<T: Scalar>(kernel: &FitKernel<T>) -> T {
    let n = kernel.n_clusters() as f64;
    let p = kernel.p() as f64;
    T::lit((p / (n - p)).min(0.5))
}

/// Liang-Zeger middle matrix `sum_i d_i d_i^T`.
pub fn lz_middle<T: Scalar>(kernel: &FitKernel<T>) -> DMatrix<T> {
    let scores: Vec<_> = kernel.clusters().iter().map(|c| c.score.clone()).collect();
    outer_sum(&scores, kernel.p())
}

/// Leverage-family middle matrix `sum_i f_i(c) f_i(c)^T`.
pub fn leverage_middle<T: Scalar>(kernel: &FitKernel<T>, c: T) -> crate::Result<DMatrix<T>> {
    Ok(outer_sum(&leverage_scores(kernel, c)?, kernel.p()))
}

/// `V(c) = Delta [sum_i f_i(c) f_i(c)^T] Delta`.
pub fn sandwich_family<T: Scalar>(kernel: &FitKernel<T>, c: T) -> crate::Result<DMatrix<T>> {
    Ok(symmetrize(&sandwich(kernel, &leverage_middle(kernel, c)?)))
}

/// Mean-centered, `c_N`-scaled middle matrix of the proposed estimator.
pub fn ar_middle<T: Scalar>(kernel: &FitKernel<T>) -> crate::Result<DMatrix<T>> {
    let f = leverage_scores(kernel, T::one())?;
    Ok(centered_outer_sum(&f, kernel.p()) * morel_factor(kernel))
}

/// Pooled-correlation middle matrix from (possibly leverage-adjusted)
/// residuals with the given divisor.
fn pooled_middle<T: Scalar>(kernel: &FitKernel<T>, residuals: &[DVector<T>], divisor: T) -> DMatrix<T> {
    let n = kernel.clusters()[0].len();
    let mut ru = DMatrix::zeros(n, n);
    for (c, r) in kernel.clusters().iter().zip(residuals) {
        let u = r.component_div(&c.w.map(|w| w.sqrt()));
        ru.ger(T::one(), &u, &u, T::one());
    }
    ru /= divisor;
    let p = kernel.p();
    let mut m = DMatrix::zeros(p, p);
    for c in kernel.clusters() {
        let sw = c.w.map(|w| w.sqrt());
        let g = c.v_inv_d();
        // W^{1/2} V^{-1} D
        let g = DMatrix::from_fn(g.nrows(), g.ncols(), |j, k| g[(j, k)] * sw[j]);
        m += g.transpose() * &ru * g;
    }
    symmetrize(&m)
}

/// Fan-Zhang-Zhang middle matrix. The cross-cluster contamination
/// `sum_{j != i} H_ij r_j r_j^T H_ij^T` collapses to
/// `D_i Delta (I1 - d_i d_i^T) Delta D_i^T` with `I1 = sum_j d_j d_j^T`.
fn fz_middle<T: Scalar>(kernel: &FitKernel<T>, cache: &LeverageCache<T>) -> DMatrix<T> {
    let p = kernel.p();
    let delta = kernel.delta();
    let i1 = lz_middle(kernel);
    let mut m = DMatrix::zeros(p, p);
    for (c, s) in kernel.clusters().iter().zip(&cache.clusters) {
        let mut others = i1.clone();
        others.ger(-T::one(), &c.score, &c.score, T::one());
        let inner = &s.r * s.r.transpose() - &s.d * delta * others * delta * s.d.transpose();
        let g = s.d.transpose() * s.power_matrix(T::one());
        m += &g * inner * g.transpose();
    }
    symmetrize(&m)
}

/// Evaluates several estimators on one kernel, sharing the leverage
/// decomposition.
pub fn estimate_all<T: Scalar>(
    kernel: &FitKernel<T>,
    ids: &[EstimatorId],
    opts: &EstimatorOptions,
) -> Vec<VarianceEstimate<T>> {
    let mut cache: Option<Option<LeverageCache<T>>> = None;
    ids.iter()
        .map(|&id| {
            let needs_leverage = id.requires_leverage_inverse() || (id == EstimatorId::Wb && opts.wb_exponent > 0.0);
            let lev = if needs_leverage && !(id.requires_balance() && !kernel.is_balanced()) {
                cache.get_or_insert_with(|| LeverageCache::new(kernel).ok()).as_ref()
            } else {
                None
            };
            evaluate(kernel, id, opts, lev, needs_leverage)
        })
        .collect()
}

pub fn estimate_variance<T: Scalar>(kernel: &FitKernel<T>, id: EstimatorId) -> VarianceEstimate<T> {
    estimate_variance_with(kernel, id, &EstimatorOptions::default())
}

pub fn estimate_variance_with<T: Scalar>(
    kernel: &FitKernel<T>,
    id: EstimatorId,
    opts: &EstimatorOptions,
) -> VarianceEstimate<T> {
    estimate_all(kernel, &[id], opts).remove(0)
}

fn evaluate<T: Scalar>(
    kernel: &FitKernel<T>,
    id: EstimatorId,
    opts: &EstimatorOptions,
    lev: Option<&LeverageCache<T>>,
    needs_leverage: bool,
) -> VarianceEstimate<T> {
    let p = kernel.p();
    if id.requires_balance() && !kernel.is_balanced() {
        return VarianceEstimate::incomputable(id, p, IncomputableReason::UnbalancedPooling);
    }
    let lev = match (needs_leverage, lev) {
        (true, None) => return VarianceEstimate::incomputable(id, p, IncomputableReason::SingularLeverage),
        (_, l) => l,
    };
    let n = T::from_usize_lossy(kernel.n_clusters());
    let delta = kernel.delta();
    let half = T::lit(0.5);

    let v = match id {
        EstimatorId::Lz => sandwich(kernel, &lz_middle(kernel)),
        EstimatorId::Df => {
            let np = T::from_usize_lossy(kernel.n_clusters() - p);
            sandwich(kernel, &lz_middle(kernel)) * (n / np)
        }
        EstimatorId::Kc => sandwich(kernel, &outer_sum(&lev.unwrap().scores(kernel, half), p)),
        EstimatorId::Md => sandwich(kernel, &outer_sum(&lev.unwrap().scores(kernel, T::one()), p)),
        EstimatorId::Fw => {
            let l = lev.unwrap();
            let kc = sandwich(kernel, &outer_sum(&l.scores(kernel, half), p));
            let md = sandwich(kernel, &outer_sum(&l.scores(kernel, T::one()), p));
            (kc + md) * half
        }
        EstimatorId::Ar => {
            let f = lev.unwrap().scores(kernel, T::one());
            sandwich(kernel, &(centered_outer_sum(&f, p) * morel_factor(kernel)))
        }
        EstimatorId::Fg => {
            let clip = T::lit(opts.fg_clip);
            let mut m = DMatrix::zeros(p, p);
            for c in kernel.clusters() {
                let l = &c.a * delta;
                let scaled = DVector::from_fn(p, |s, _| {
                    let h = l[(s, s)].min(clip);
                    c.score[s] / (T::one() - h).sqrt()
                });
                m.ger(T::one(), &scaled, &scaled, T::one());
            }
            sandwich(kernel, &m)
        }
        EstimatorId::Mbn => {
            let scores: Vec<_> = kernel.clusters().iter().map(|c| c.score.clone()).collect();
            let i1c = centered_outer_sum(&scores, p);
            let kappa = ((delta * &i1c).trace() / T::from_usize_lossy(p)).max(T::one());
            sandwich(kernel, &(i1c * morel_factor(kernel))) + delta * (kappa * morel_shrinkage(kernel))
        }
        EstimatorId::Pan | EstimatorId::Gst | EstimatorId::Rs => {
            let r: Vec<_> = kernel.clusters().iter().map(|c| c.r.clone()).collect();
            let divisor = if id == EstimatorId::Gst {
                T::from_usize_lossy(kernel.n_clusters() - p)
            } else {
                n
            };
            let m = pooled_middle(kernel, &r, divisor);
            let v = sandwich(kernel, &m);
            if id == EstimatorId::Rs {
                let det = (delta * &m).determinant().abs();
                let d_det = det.powf(T::one() / T::from_usize_lossy(p)).max(T::one());
                v + delta * (morel_shrinkage(kernel) * d_det)
            } else {
                v
            }
        }
        EstimatorId::Wl => {
            let r = lev.unwrap().residuals(kernel, T::one());
            sandwich(kernel, &pooled_middle(kernel, &r, n))
        }
        EstimatorId::Wb => {
            let c = T::lit(opts.wb_exponent);
            let r = match lev {
                Some(l) => l.residuals(kernel, c),
                None => kernel.clusters().iter().map(|q| q.r.clone()).collect(),
            };
            sandwich(kernel, &pooled_middle(kernel, &r, n))
        }
        EstimatorId::Fz => sandwich(kernel, &fz_middle(kernel, lev.unwrap())),
    };
    VarianceEstimate::from_matrix(id, v)
}

#[cfg(test)]
mod tests;
