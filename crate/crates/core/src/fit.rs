//! Fisher scoring for the (optionally Firth-penalized) estimating equation,
//! with moment updates of the working correlation and dispersion.

use std::fmt;

use nalgebra::DVector;

use crate::error::{PgeeError, Result};
use crate::gee::{assemble_kernel, firth_penalty_from_kernel, gee_score, FitKernel};
use crate::model::{AlphaMode, CorrStructure, DispersionMode, LongitudinalDataset, WorkingModel};
use crate::scalar::Scalar;

/// Maximum number of step halvings per iteration.
pub const MAX_HALVINGS: usize = 10;

/// Floor applied to the Pearson dispersion estimate.
pub const PHI_FLOOR: f64 = 1e-6;

/// Admissible alpha intervals are shrunk by this amount before clamping.
pub const ALPHA_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub penalized: bool,
    pub max_iter: usize,
    /// Convergence tolerance on the sup-norm of the scoring step.
    pub tol: f64,
    /// Divergence threshold on the sup-norm of beta.
    pub beta_cap: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            penalized: true,
            max_iter: 50,
            tol: 1e-6,
            beta_cap: 50.0,
        }
    }
}

impl FitOptions {
    pub fn unpenalized() -> Self {
        Self {
            penalized: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(PgeeError::InvalidOption("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(PgeeError::InvalidOption("tol must be positive".into()));
        }
        if !(self.beta_cap > 0.0) {
            return Err(PgeeError::InvalidOption("beta_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Why a fit stopped without converging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DivergenceReason {
    BetaCap,
    SingularInformation,
    NumericOverflow,
    MaxIterations,
}

impl fmt::Display for DivergenceReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DivergenceReason::BetaCap => "beta-cap",
            DivergenceReason::SingularInformation => "singular-information",
            DivergenceReason::NumericOverflow => "numeric-overflow",
            DivergenceReason::MaxIterations => "max-iterations",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FitWarning {
    /// The alpha moment estimate fell outside the admissible interval.
    AlphaClamped,
    /// The alpha moment denominator was not positive; alpha set to zero.
    AlphaDegenerate,
    /// The dispersion estimate was floored.
    PhiFloored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaEstimate<T> {
    pub value: T,
    pub clamped: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiEstimate<T> {
    pub value: T,
    pub floored: bool,
}

/// Result of [`fit`]. Non-convergence is a state, not an error.
#[derive(Debug, Clone)]
pub struct PgeeFit<T: Scalar> {
    pub beta_hat: DVector<T>,
    pub alpha_hat: T,
    pub phi_hat: T,
    pub converged: bool,
    pub iterations: usize,
    pub penalized: bool,
    /// Kernel at `(beta_hat, alpha_hat, phi_hat)`; absent only when it
    /// could not be assembled.
    pub kernel: Option<FitKernel<T>>,
    pub diverged_reason: Option<DivergenceReason>,
    pub warnings: Vec<FitWarning>,
}

impl<T: Scalar> PgeeFit<T> {
    /// Kernel of a converged fit.
    pub fn converged_kernel(&self) -> Option<&FitKernel<T>> {
        if self.converged {
            self.kernel.as_ref()
        } else {
            None
        }
    }
}

fn pearson_residuals<T: Scalar>(kernel: &FitKernel<T>, phi: T) -> Vec<DVector<T>> {
    kernel
        .clusters()
        .iter()
        .map(|c| DVector::from_fn(c.len(), |j, _| c.r[j] / (c.w[j] * phi).sqrt()))
        .collect()
}

/// Exchangeable moment ratio `sum_i sum_{j<k} e_ij e_ik / (sum_i n_i(n_i-1)/2 - p)`.
/// `None` when the denominator is not positive.
pub fn exchangeable_moment<T: Scalar>(pearson: &[DVector<T>], p: usize) -> Option<T> {
    let mut num = T::zero();
    let mut pairs = 0usize;
    for e in pearson {
        let n = e.len();
        pairs += n * n.saturating_sub(1) / 2;
        let s: T = e.iter().copied().fold(T::zero(), |a, b| a + b);
        let ss: T = e.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b);
        num += (s * s - ss) * T::lit(0.5);
    }
    let denom = pairs as f64 - p as f64;
    (denom > 0.0).then(|| num / T::lit(denom))
}

/// Lag-one moment ratio `sum_i sum_j e_ij e_i,j+1 / (sum_i (n_i - 1) - p)`.
pub fn ar1_moment<T: Scalar>(pearson: &[DVector<T>], p: usize) -> Option<T> {
    let mut num = T::zero();
    let mut pairs = 0usize;
    for e in pearson {
        let n = e.len();
        pairs += n.saturating_sub(1);
        for j in 1..n {
            num += e[j - 1] * e[j];
        }
    }
    let denom = pairs as f64 - p as f64;
    (denom > 0.0).then(|| num / T::lit(denom))
}

/// Clamps a raw moment to the admissible interval shrunk by [`ALPHA_MARGIN`].
pub fn clamp_alpha<T: Scalar>(raw: Option<T>, structure: CorrStructure, n_max: usize) -> AlphaEstimate<T> {
    let Some(value) = raw.filter(|v| v.is_finite_value()) else {
        return AlphaEstimate {
            value: T::zero(),
            clamped: false,
            degenerate: true,
        };
    };
    if structure == CorrStructure::Independence {
        return AlphaEstimate {
            value: T::zero(),
            clamped: false,
            degenerate: false,
        };
    }
    let (lo, hi) = structure.admissible_range(n_max);
    let lo = T::lit(lo + ALPHA_MARGIN);
    let hi = T::lit(hi - ALPHA_MARGIN);
    let clamped = value < lo || value > hi;
    AlphaEstimate {
        value: value.clamp(lo, hi),
        clamped,
        degenerate: false,
    }
}

/// Moment estimate of the working correlation from Pearson residuals
/// `e_ij = r_ij / sqrt(w_ij phi)` at the kernel's dispersion.
pub fn estimate_alpha<T: Scalar>(kernel: &FitKernel<T>, structure: CorrStructure) -> AlphaEstimate<T> {
    let e = pearson_residuals(kernel, kernel.phi());
    let n_max = kernel.clusters().iter().map(|c| c.len()).max().unwrap_or(0);
    let raw = match structure {
        CorrStructure::Independence => Some(T::zero()),
        CorrStructure::Exchangeable => exchangeable_moment(&e, kernel.p()),
        CorrStructure::Ar1 => ar1_moment(&e, kernel.p()),
    };
    clamp_alpha(raw, structure, n_max)
}

/// Pearson dispersion `sum e_ij^2 / (n* - p)` with residuals at unit scale.
pub fn estimate_phi<T: Scalar>(kernel: &FitKernel<T>) -> PhiEstimate<T> {
    let e = pearson_residuals(kernel, T::one());
    let ss = e
        .iter()
        .flat_map(|v| v.iter().map(|&x| x * x))
        .fold(T::zero(), |a, b| a + b);
    let dof = kernel.n_obs() as f64 - kernel.p() as f64;
    let raw = if dof > 0.0 { ss / T::lit(dof) } else { T::zero() };
    let floor = T::lit(PHI_FLOOR);
    if raw < floor || !raw.is_finite_value() {
        PhiEstimate {
            value: floor,
            floored: true,
        }
    } else {
        PhiEstimate {
            value: raw,
            floored: false,
        }
    }
}

fn sup_norm<T: Scalar>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

struct Point<T: Scalar> {
    kernel: FitKernel<T>,
    ustar: DVector<T>,
}

fn evaluate<T: Scalar>(
    beta: &DVector<T>,
    structure: CorrStructure,
    alpha: T,
    phi: T,
    data: &LongitudinalDataset<T>,
    penalized: bool,
) -> Result<Point<T>> {
    let kernel = assemble_kernel(beta, structure, alpha, phi, data)?;
    let mut ustar = gee_score(&kernel);
    if penalized {
        ustar += firth_penalty_from_kernel(&kernel, data);
    }
    Ok(Point { kernel, ustar })
}

enum Stop {
    Diverged(DivergenceReason),
    Error(PgeeError),
}

fn classify(err: PgeeError) -> Stop {
    match err {
        PgeeError::SingularInformation { .. } => Stop::Diverged(DivergenceReason::SingularInformation),
        PgeeError::NumericOverflow(_) => Stop::Diverged(DivergenceReason::NumericOverflow),
        other => Stop::Error(other),
    }
}

/// Solves `U(beta) + b(beta) = 0` (or `U(beta) = 0` when unpenalized) by
/// Fisher scoring from `beta = 0`.
///
/// Each iteration refreshes `phi` and then `alpha` from the current
/// residuals (when estimated), takes the scoring step
/// `Delta [U + b]`, and halves it up to [`MAX_HALVINGS`] times while the
/// sup-norm of the penalized score fails to decrease.
pub fn fit<T: Scalar>(data: &LongitudinalDataset<T>, wm: &WorkingModel<T>, opts: &FitOptions) -> Result<PgeeFit<T>> {
    opts.validate()?;
    let n_max = data.max_cluster_size();
    wm.validate(n_max)?;
    let structure = wm.structure;
    let estimate_alpha_mode = structure != CorrStructure::Independence && matches!(wm.alpha, AlphaMode::Estimate);
    let estimate_phi_mode = matches!(wm.dispersion, DispersionMode::PearsonPlugin);

    let p = data.p();
    let mut beta = DVector::<T>::zeros(p);
    let mut alpha = wm.initial_alpha();
    let mut phi = wm.initial_phi();
    let mut warnings = Vec::new();
    let tol = T::lit(opts.tol);
    let cap = T::lit(opts.beta_cap);

    let stopped = |beta: DVector<T>, alpha, phi, iterations, kernel, reason, warnings| PgeeFit {
        beta_hat: beta,
        alpha_hat: alpha,
        phi_hat: phi,
        converged: false,
        iterations,
        penalized: opts.penalized,
        kernel,
        diverged_reason: Some(reason),
        warnings,
    };

    // Kernel at the current beta with the previous nuisance parameters.
    let mut carried: Option<FitKernel<T>> = None;

    for iter in 1..=opts.max_iter {
        let base = match carried.take() {
            Some(k) => k,
            None => match assemble_kernel(&beta, structure, alpha, phi, data) {
                Ok(k) => k,
                Err(e) => match classify(e) {
                    Stop::Diverged(r) => return Ok(stopped(beta, alpha, phi, iter - 1, None, r, warnings)),
                    Stop::Error(e) => return Err(e),
                },
            },
        };

        let mut refreshed = false;
        if estimate_phi_mode {
            let est = estimate_phi(&base);
            if est.floored && !warnings.contains(&FitWarning::PhiFloored) {
                warnings.push(FitWarning::PhiFloored);
            }
            phi = est.value;
            refreshed = true;
        }
        if estimate_alpha_mode {
            let pearson = pearson_residuals(&base, phi);
            let raw = match structure {
                CorrStructure::Exchangeable => exchangeable_moment(&pearson, p),
                CorrStructure::Ar1 => ar1_moment(&pearson, p),
                CorrStructure::Independence => Some(T::zero()),
            };
            let est = clamp_alpha(raw, structure, n_max);
            if est.clamped && !warnings.contains(&FitWarning::AlphaClamped) {
                warnings.push(FitWarning::AlphaClamped);
            }
            if est.degenerate && !warnings.contains(&FitWarning::AlphaDegenerate) {
                warnings.push(FitWarning::AlphaDegenerate);
            }
            alpha = est.value;
            refreshed = true;
        }

        let current = if refreshed {
            evaluate(&beta, structure, alpha, phi, data, opts.penalized)
        } else {
            let mut ustar = gee_score(&base);
            if opts.penalized {
                ustar += firth_penalty_from_kernel(&base, data);
            }
            Ok(Point { kernel: base, ustar })
        };
        let current = match current {
            Ok(pt) => pt,
            Err(e) => match classify(e) {
                Stop::Diverged(r) => return Ok(stopped(beta, alpha, phi, iter, None, r, warnings)),
                Stop::Error(e) => return Err(e),
            },
        };

        let step = current.kernel.delta() * &current.ustar;
        if step.iter().any(|v| !v.is_finite_value()) {
            return Ok(stopped(
                beta,
                alpha,
                phi,
                iter,
                Some(current.kernel),
                DivergenceReason::NumericOverflow,
                warnings,
            ));
        }
        let full_step_norm = sup_norm(&step);
        let merit = sup_norm(&current.ustar);

        let mut scale = T::one();
        let mut accepted: Option<(DVector<T>, Option<FitKernel<T>>)> = None;
        for halving in 0..=MAX_HALVINGS {
            let candidate = &beta + &step * scale;
            match evaluate(&candidate, structure, alpha, phi, data, opts.penalized) {
                Ok(pt) if sup_norm(&pt.ustar) <= merit || halving == MAX_HALVINGS => {
                    accepted = Some((candidate, Some(pt.kernel)));
                    break;
                }
                Ok(_) => {}
                Err(e) => {
                    if let Stop::Error(e) = classify(e) {
                        return Err(e);
                    }
                    if halving == MAX_HALVINGS {
                        accepted = Some((candidate, None));
                        break;
                    }
                }
            }
            scale *= T::lit(0.5);
        }
        let (next, next_kernel) = accepted.expect("loop always accepts on the last halving");
        beta = next;

        if sup_norm(&beta) > cap {
            return Ok(stopped(
                beta,
                alpha,
                phi,
                iter,
                next_kernel,
                DivergenceReason::BetaCap,
                warnings,
            ));
        }

        if full_step_norm < tol {
            let kernel = match next_kernel {
                Some(k) => k,
                None => {
                    return Ok(stopped(
                        beta,
                        alpha,
                        phi,
                        iter,
                        None,
                        DivergenceReason::SingularInformation,
                        warnings,
                    ))
                }
            };
            return Ok(PgeeFit {
                beta_hat: beta,
                alpha_hat: alpha,
                phi_hat: phi,
                converged: true,
                iterations: iter,
                penalized: opts.penalized,
                kernel: Some(kernel),
                diverged_reason: None,
                warnings,
            });
        }
        carried = next_kernel;
    }

    let kernel = assemble_kernel(&beta, structure, alpha, phi, data).ok();
    Ok(stopped(
        beta,
        alpha,
        phi,
        opts.max_iter,
        kernel,
        DivergenceReason::MaxIterations,
        warnings,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cluster, INTERCEPT_NAME};
    use nalgebra::{dvector, DMatrix};

    fn intercept_only(ys: &[Vec<f64>]) -> LongitudinalDataset<f64> {
        let clusters = ys
            .iter()
            .enumerate()
            .map(|(i, y)| {
                Cluster::new(
                    format!("c{i}"),
                    DVector::from_column_slice(y),
                    DMatrix::from_element(y.len(), 1, 1.0),
                    None,
                )
                .unwrap()
            })
            .collect();
        LongitudinalDataset::new(clusters, vec![INTERCEPT_NAME.into()]).unwrap()
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn symmetric_outcomes_give_zero_intercept() {
        let ds = intercept_only(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 0.0]]);
        let wm = WorkingModel::new(CorrStructure::Independence);
        let f = fit(&ds, &wm, &FitOptions::default()).unwrap();
        assert!(f.converged);
        assert!(f.beta_hat[0].abs() < 1e-10);
    }

    #[test]
    fn all_zero_outcomes_match_firth_closed_form() {
        let ds = intercept_only(&vec![vec![0.0; 4]; 5]);
        let wm = WorkingModel::new(CorrStructure::Independence);
        let f = fit(&ds, &wm, &FitOptions::default()).unwrap();
        assert!(f.converged);
        assert!((f.beta_hat[0] - logit(0.5 / 21.0)).abs() < 1e-6);
        assert!((f.beta_hat[0] + 3.7136).abs() < 1e-4);
    }

    #[test]
    fn unpenalized_separated_intercept_diverges() {
        let ds = intercept_only(&vec![vec![0.0; 4]; 5]);
        let wm = WorkingModel::new(CorrStructure::Independence);
        let f = fit(&ds, &wm, &FitOptions::unpenalized()).unwrap();
        assert!(!f.converged);
        assert!(matches!(
            f.diverged_reason,
            Some(DivergenceReason::BetaCap | DivergenceReason::MaxIterations)
        ));
        assert!(f.beta_hat[0] < -40.0);
    }

    #[test]
    fn converged_fit_satisfies_root_condition() {
        let ds = intercept_only(&[
            vec![0.0, 1.0, 1.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
        ]);
        for penalized in [true, false] {
            let opts = FitOptions {
                penalized,
                ..FitOptions::default()
            };
            let f = fit(&ds, &WorkingModel::new(CorrStructure::Exchangeable), &opts).unwrap();
            assert!(f.converged);
            let k = f.kernel.as_ref().unwrap();
            let mut u = gee_score(k);
            if penalized {
                u += firth_penalty_from_kernel(k, &ds);
            }
            let bound = 10.0 * opts.tol * k.i0().abs().row_sum().max().max(1.0);
            assert!(sup_norm(&u) <= bound);
        }
    }

    #[test]
    fn zero_residuals_give_zero_alpha() {
        let pearson = vec![DVector::zeros(3), DVector::zeros(3)];
        assert_eq!(exchangeable_moment::<f64>(&pearson, 1), Some(0.0));
        assert_eq!(ar1_moment::<f64>(&pearson, 1), Some(0.0));
    }

    #[test]
    fn alpha_at_boundary_is_clamped() {
        let pearson = vec![dvector![1.0, 1.0], dvector![0.0, 0.0]];
        let raw = exchangeable_moment::<f64>(&pearson, 1);
        assert_eq!(raw, Some(1.0));
        let est = clamp_alpha(raw, CorrStructure::Exchangeable, 2);
        assert!(est.clamped);
        assert!(est.value < 1.0);
        assert!((est.value - (1.0 - ALPHA_MARGIN)).abs() < 1e-15);
    }

    #[test]
    fn non_positive_denominator_is_degenerate() {
        let pearson = vec![dvector![1.0, 1.0]];
        assert_eq!(exchangeable_moment::<f64>(&pearson, 1), None);
        let est = clamp_alpha(None::<f64>, CorrStructure::Exchangeable, 2);
        assert!(est.degenerate);
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn phi_floored_for_zero_residuals() {
        let ds = intercept_only(&vec![vec![0.0, 1.0]; 4]);
        let k = assemble_kernel(&dvector![0.0], CorrStructure::Independence, 0.0, 1.0, &ds).unwrap();
        let zero = k.with_residuals(vec![DVector::zeros(2); 4]).unwrap();
        let est = estimate_phi(&zero);
        assert!(est.floored);
        assert_eq!(est.value, PHI_FLOOR);
    }

    #[test]
    fn fixed_dispersion_mode_keeps_phi_one() {
        let ds = intercept_only(&[vec![0.0, 1.0, 1.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]);
        let f = fit(
            &ds,
            &WorkingModel::new(CorrStructure::Exchangeable),
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(f.phi_hat, 1.0);
    }

    #[test]
    fn options_are_validated() {
        let ds = intercept_only(&vec![vec![0.0, 1.0]; 3]);
        let wm = WorkingModel::new(CorrStructure::Independence);
        let bad = FitOptions {
            tol: 0.0,
            ..FitOptions::default()
        };
        assert!(fit(&ds, &wm, &bad).is_err());
    }
}
