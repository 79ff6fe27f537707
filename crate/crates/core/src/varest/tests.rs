use super::*;
use crate::gee::assemble_kernel;
use crate::model::{Cluster, CorrStructure, LongitudinalDataset, INTERCEPT_NAME};
use nalgebra::dvector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dataset(seed: u64, n_clusters: usize, sizes: &[usize], p: usize) -> LongitudinalDataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = (0..n_clusters)
        .map(|i| {
            let n = sizes[i % sizes.len()];
            let x = DMatrix::from_fn(n, p, |_, k| if k == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
            let y = DVector::from_fn(n, |_, _| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
            Cluster::new(format!("c{i}"), y, x, None).unwrap()
        })
        .collect();
    let mut names = vec![INTERCEPT_NAME.to_owned()];
    names.extend((1..p).map(|k| format!("x{k}")));
    LongitudinalDataset::new(clusters, names).unwrap()
}

fn random_kernel(seed: u64, n_clusters: usize, sizes: &[usize]) -> FitKernel<f64> {
    let ds = random_dataset(seed, n_clusters, sizes, 3);
    assemble_kernel(&dvector![-0.4, 0.3, -0.2], CorrStructure::Exchangeable, 0.3, 1.3, &ds).unwrap()
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.abs().max()
}

fn assert_close(a: &DMatrix<f64>, b: &DMatrix<f64>, rel: f64) {
    let scale = max_abs(a).max(max_abs(b)).max(1e-300);
    assert!(max_abs(&(a - b)) <= rel * scale, "{a} vs {b}");
}

fn identical_intercept_clusters(n_clusters: usize, n: usize) -> LongitudinalDataset<f64> {
    let clusters = (0..n_clusters)
        .map(|i| {
            let y = DVector::from_fn(n, |j, _| ((i + j) % 2) as f64);
            Cluster::new(format!("c{i}"), y, DMatrix::from_element(n, 1, 1.0), None).unwrap()
        })
        .collect();
    LongitudinalDataset::new(clusters, vec![INTERCEPT_NAME.into()]).unwrap()
}

fn two_group(n0: usize, n1: usize, n: usize) -> LongitudinalDataset<f64> {
    let clusters = (0..n0 + n1)
        .map(|i| {
            let trt = if i < n1 { 1.0 } else { 0.0 };
            let x = DMatrix::from_fn(n, 2, |_, k| if k == 0 { 1.0 } else { trt });
            let y = DVector::from_fn(n, |j, _| ((i + j) % 2) as f64);
            Cluster::new(format!("c{i}"), y, x, None).unwrap()
        })
        .collect();
    LongitudinalDataset::new(clusters, vec![INTERCEPT_NAME.into(), "trt".into()]).unwrap()
}

#[test]
fn zero_exponent_returns_plain_scores() {
    let k = random_kernel(1, 8, &[4]);
    let f = leverage_scores(&k, 0.0).unwrap();
    for (fi, c) in f.iter().zip(k.clusters()) {
        assert_eq!(fi, &c.score);
    }
}

#[test]
fn identical_clusters_inflate_scores_by_n_over_n_minus_one() {
    let ds = identical_intercept_clusters(6, 3);
    let k = assemble_kernel(&dvector![0.2], CorrStructure::Ar1, 0.4, 1.0, &ds).unwrap();
    let f = leverage_scores(&k, 1.0).unwrap();
    for (fi, c) in f.iter().zip(k.clusters()) {
        assert!((fi[0] - c.score[0] * 6.0 / 5.0).abs() < 1e-12);
    }
}

#[test]
fn unit_exponent_matches_dense_inverse() {
    let k = random_kernel(7, 9, &[3, 5]);
    let f = leverage_scores(&k, 1.0).unwrap();
    for (i, c) in k.clusters().iter().enumerate() {
        let n = c.len();
        let ih = DMatrix::identity(n, n) - k.hat_block(i);
        let inv = ih.try_inverse().unwrap();
        let oracle = c.v_inv_d().transpose() * inv * &c.r;
        assert!((&f[i] - oracle).amax() < 1e-8);
    }
}

#[test]
fn half_exponent_squares_to_unit_exponent() {
    let k = random_kernel(11, 8, &[4]);
    let cache = LeverageCache::new(&k).unwrap();
    for (i, s) in cache.clusters.iter().enumerate() {
        let half = s.power_matrix(0.5);
        let full = s.power_matrix(1.0);
        assert_close(&(&half * &half), &full, 1e-12);
        // Back in the original coordinates the square root squares to (I - H)^{-1}.
        let l = &k.clusters()[i].v_chol;
        let linv = l.clone().try_inverse().unwrap();
        let root = l * half * &linv;
        let n = l.nrows();
        let ih = DMatrix::identity(n, n) - k.hat_block(i);
        assert_close(&(&root * &root * ih), &DMatrix::identity(n, n), 1e-10);
    }
}

#[test]
fn exponent_outside_unit_interval_is_rejected() {
    let k = random_kernel(3, 8, &[3]);
    assert!(leverage_scores(&k, 1.5).is_err());
}

#[test]
fn family_members_are_consistent() {
    let k = random_kernel(21, 10, &[4]);
    let lz = estimate_variance(&k, EstimatorId::Lz).v;
    let df = estimate_variance(&k, EstimatorId::Df).v;
    let kc = estimate_variance(&k, EstimatorId::Kc).v;
    let md = estimate_variance(&k, EstimatorId::Md).v;
    let fw = estimate_variance(&k, EstimatorId::Fw).v;
    assert_close(&df, &(&lz * (10.0 / 7.0)), 1e-12);
    assert_close(&fw, &((&kc + &md) * 0.5), 1e-12);
    assert_close(&sandwich_family(&k, 0.0).unwrap(), &lz, 1e-12);
    assert_close(&sandwich_family(&k, 0.5).unwrap(), &kc, 1e-12);
    assert_close(&sandwich_family(&k, 1.0).unwrap(), &md, 1e-12);
}

#[test]
fn morel_factor_for_ten_clusters_of_four() {
    let ds = random_dataset(5, 10, &[4], 3);
    let k = assemble_kernel(&dvector![0.0, 0.0, 0.0], CorrStructure::Independence, 0.0, 1.0, &ds).unwrap();
    let c_n: f64 = morel_factor(&k);
    assert!((c_n - 39.0 / 37.0 * 10.0 / 9.0).abs() < 1e-14);
    assert!((c_n - 1.0 - 0.171).abs() < 5e-4);
}

#[test]
fn mbn_additive_term_is_psd_and_shrinks() {
    for n in [10usize, 40, 160] {
        let k = random_kernel(31, n, &[4]);
        let mbn = estimate_variance(&k, EstimatorId::Mbn).v;
        let scores: Vec<_> = k.clusters().iter().map(|c| c.score.clone()).collect();
        let first = sandwich(&k, &(centered_outer_sum(&scores, 3) * morel_factor(&k)));
        let extra = symmetrize(&(mbn - first));
        let eig = extra.clone().symmetric_eigen().eigenvalues;
        assert!(eig.min() >= -1e-12);
        let delta_n: f64 = morel_shrinkage(&k);
        assert!((delta_n - (3.0 / (n as f64 - 3.0)).min(0.5)).abs() < 1e-15);
    }
}

#[test]
fn ar_identity_holds() {
    let k = random_kernel(41, 12, &[3, 4]);
    let f = leverage_scores(&k, 1.0).unwrap();
    let n = f.len() as f64;
    let fbar = f.iter().fold(DVector::zeros(3), |a, b| a + b) / n;
    let md = outer_sum(&f, 3);
    let expected = (md - &fbar * fbar.transpose() * n) * morel_factor(&k);
    assert_close(&ar_middle(&k).unwrap(), &expected, 1e-12);
}

#[test]
fn ar_equals_scaled_md_when_scores_cancel() {
    // Mirrored residuals on identical clusters make the corrected scores sum to zero.
    let ds = identical_intercept_clusters(6, 3);
    let k = assemble_kernel(&dvector![0.3], CorrStructure::Exchangeable, 0.2, 1.0, &ds).unwrap();
    let base = [
        dvector![0.4, -0.1, 0.2],
        dvector![-0.3, 0.5, 0.1],
        dvector![0.2, 0.2, -0.6],
    ];
    let residuals: Vec<_> = (0..6)
        .map(|i| if i < 3 { base[i].clone() } else { -&base[i - 3] })
        .collect();
    let k = k.with_residuals(residuals).unwrap();
    let md = leverage_middle(&k, 1.0).unwrap();
    assert_close(&ar_middle(&k).unwrap(), &(md * morel_factor(&k)), 1e-12);
}

#[test]
fn morel_first_term_is_dispersion_invariant() {
    let ds = random_dataset(51, 10, &[4], 3);
    let beta = dvector![0.1, -0.2, 0.3];
    let first = |phi: f64| {
        let k = assemble_kernel(&beta, CorrStructure::Exchangeable, 0.25, phi, &ds).unwrap();
        let scores: Vec<_> = k.clusters().iter().map(|c| c.score.clone()).collect();
        sandwich(&k, &centered_outer_sum(&scores, 3))
    };
    assert_close(&first(1.0), &first(3.7), 1e-10);
}

#[test]
fn fz_matches_dense_double_loop() {
    let k = random_kernel(61, 4, &[2, 3]);
    let n = k.n_clusters();
    let p = k.p();
    let mut oracle = DMatrix::zeros(p, p);
    for i in 0..n {
        let ci = &k.clusters()[i];
        let ni = ci.len();
        let mut inner = &ci.r * ci.r.transpose();
        for j in 0..n {
            if j != i {
                let hij = k.cross_hat_block(i, j);
                let rj = &k.clusters()[j].r;
                inner -= &hij * rj * rj.transpose() * hij.transpose();
            }
        }
        let inv = (DMatrix::identity(ni, ni) - k.hat_block(i)).try_inverse().unwrap();
        let g = ci.v_inv_d().transpose() * inv;
        oracle += &g * inner * g.transpose();
    }
    let oracle = sandwich(&k, &oracle);
    let fz = estimate_variance(&k, EstimatorId::Fz);
    assert_close(&fz.v, &symmetrize(&oracle), 1e-9);
}

#[test]
fn pooling_estimators_refuse_unbalanced_data() {
    let k = random_kernel(71, 10, &[2, 6]);
    for id in EstimatorId::ALL {
        let est = estimate_variance(&k, id);
        if id.requires_balance() {
            assert!(!est.computable);
            assert_eq!(est.incomputable_reason, Some(IncomputableReason::UnbalancedPooling));
        } else {
            assert!(est.incomputable_reason != Some(IncomputableReason::UnbalancedPooling));
        }
    }
}

#[test]
fn pan_with_zero_exponent_is_wb_and_wl_is_unit_exponent() {
    let k = random_kernel(81, 10, &[4]);
    let pan = estimate_variance(&k, EstimatorId::Pan).v;
    let wl = estimate_variance(&k, EstimatorId::Wl).v;
    let wb0 = estimate_variance_with(
        &k,
        EstimatorId::Wb,
        &EstimatorOptions {
            wb_exponent: 0.0,
            ..Default::default()
        },
    )
    .v;
    let wb1 = estimate_variance_with(
        &k,
        EstimatorId::Wb,
        &EstimatorOptions {
            wb_exponent: 1.0,
            ..Default::default()
        },
    )
    .v;
    assert_close(&wb0, &pan, 1e-12);
    assert_close(&wb1, &wl, 1e-12);
    let gst = estimate_variance(&k, EstimatorId::Gst).v;
    assert_close(&gst, &(&pan * (10.0 / 7.0)), 1e-12);
}

#[test]
fn estimates_are_symmetric_and_psd_where_required() {
    for seed in 0..5 {
        let k = random_kernel(100 + seed, 12, &[4]);
        for est in estimate_all(&k, &EstimatorId::ALL, &EstimatorOptions::default()) {
            let v = &est.v;
            assert!(max_abs(&(v - v.transpose())) <= 1e-10 * max_abs(v));
            if !est.id.may_be_indefinite() {
                let min = v.clone().symmetric_eigen().eigenvalues.min();
                assert!(min >= -1e-10 * max_abs(v), "{:?} min eigenvalue {min}", est.id);
                assert!(est.computable);
            }
        }
    }
}

#[test]
fn singular_leverage_is_flagged_not_fatal() {
    // A single treated cluster carries all information on its indicator.
    let clusters = (0..5)
        .map(|i| {
            let trt = if i == 0 { 1.0 } else { 0.0 };
            let x = DMatrix::from_fn(1 + (i % 2) + 1, 2, |_, k| if k == 0 { 1.0 } else { trt });
            let n = x.nrows();
            Cluster::new(format!("c{i}"), DVector::from_fn(n, |j, _| (j % 2) as f64), x, None).unwrap()
        })
        .collect();
    let ds = LongitudinalDataset::new(clusters, vec![INTERCEPT_NAME.into(), "trt".into()]).unwrap();
    let k = assemble_kernel(&dvector![0.0, 0.0], CorrStructure::Independence, 0.0, 1.0, &ds).unwrap();
    let md = estimate_variance(&k, EstimatorId::Md);
    assert!(!md.computable);
    assert_eq!(md.incomputable_reason, Some(IncomputableReason::SingularLeverage));
    assert!(estimate_variance(&k, EstimatorId::Lz).computable);
    assert!(matches!(overcorrection_diagnostic(&k), Err(PgeeError::SingularLeverage(id)) if id == "c0"));
}

#[test]
fn identical_clusters_diagnostic() {
    let ds = identical_intercept_clusters(7, 4);
    let k = assemble_kernel(&dvector![0.4], CorrStructure::Exchangeable, 0.2, 1.0, &ds).unwrap();
    let a = k.clusters()[0].a[(0, 0)];
    let d = overcorrection_diagnostic(&k).unwrap();
    assert!((d.b_lev[(0, 0)] - 7.0 * a / 6.0).abs() < 1e-12 * a);
    assert!((d.rho[0] - 1.0 / 6.0).abs() < 1e-12);
}

#[test]
fn balanced_two_group_eigenvalues() {
    let k = assemble_kernel(
        &dvector![0.0, 0.0],
        CorrStructure::Independence,
        0.0,
        1.0,
        &two_group(5, 5, 4),
    )
    .unwrap();
    let d = overcorrection_diagnostic(&k).unwrap();
    assert!((d.eigenvalues[0] - 0.25).abs() < 1e-8);
    assert!((d.eigenvalues[1] - 0.25).abs() < 1e-8);
    assert!((d.max_inflation() - 1.25).abs() < 1e-8);
}

#[test]
fn smallest_arm_drives_worst_case() {
    let k = assemble_kernel(
        &dvector![0.0, 0.0],
        CorrStructure::Independence,
        0.0,
        1.0,
        &two_group(7, 3, 4),
    )
    .unwrap();
    let d = overcorrection_diagnostic(&k).unwrap();
    assert!((d.eigenvalues[0] - 1.0 / 6.0).abs() < 1e-8);
    assert!((d.eigenvalues[1] - 0.5).abs() < 1e-8);
    assert!((d.max_inflation() - 1.5).abs() < 1e-8);
}

#[test]
fn two_treated_clusters_give_unit_treatment_ratio() {
    let k = assemble_kernel(
        &dvector![0.0, 0.0],
        CorrStructure::Independence,
        0.0,
        1.0,
        &two_group(8, 2, 4),
    )
    .unwrap();
    let d = overcorrection_diagnostic(&k).unwrap();
    assert!((d.rho[1] - 1.0).abs() < 1e-8);
    assert!(d.rho.iter().all(|&r| r >= 0.0));
}

// Student t with two degrees of freedom has closed forms.
fn t2_cdf(t: f64) -> f64 {
    0.5 + t / (2.0 * (2.0 + t * t).sqrt())
}

fn t2_quantile(q: f64) -> f64 {
    (2.0 * q - 1.0) / (2.0 * q * (1.0 - q)).sqrt()
}

// Composite Simpson integration of the t density on [0, t].
fn t_cdf_numeric(t: f64, dof: f64) -> f64 {
    let ln_c = statrs::function::gamma::ln_gamma((dof + 1.0) / 2.0)
        - statrs::function::gamma::ln_gamma(dof / 2.0)
        - 0.5 * (dof * std::f64::consts::PI).ln();
    let dens = |x: f64| (ln_c - (dof + 1.0) / 2.0 * (1.0 + x * x / dof).ln()).exp();
    let m = 20_000;
    let h = t / m as f64;
    let mut s = dens(0.0) + dens(t);
    for i in 1..m {
        s += dens(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

#[test]
fn wald_at_null_has_unit_p_value() {
    let w = wald_test(0.3, 0.2, 20, 3, 0.3).unwrap();
    assert_eq!(w.t, 0.0);
    assert!((w.p_value - 1.0).abs() < 1e-15);
    assert!(((w.ci_high - w.estimate) - (w.estimate - w.ci_low)).abs() < 1e-15);
}

#[test]
fn wald_p_value_matches_numeric_cdf() {
    let w = wald_test(2.306, 1.0, 11, 3, 0.0).unwrap();
    assert_eq!(w.dof, 8);
    let oracle = 2.0 * (1.0 - t_cdf_numeric(2.306, 8.0));
    assert!((w.p_value - oracle).abs() < 1e-8);
    assert!((w.p_value - 0.05).abs() < 1e-3);
}

#[test]
fn two_dof_critical_value() {
    let q = t_critical(2);
    assert!((q - t2_quantile(0.975)).abs() < 1e-8);
    assert!((q - 4.303).abs() < 1e-3);
    let w = wald_test(1.0, 0.5, 5, 3, 0.0).unwrap();
    assert!((w.p_value - 2.0 * (1.0 - t2_cdf(2.0))).abs() < 1e-10);
}

#[test]
fn wald_rejects_zero_se() {
    assert!(matches!(wald_test(1.0, 0.0, 10, 2, 0.0), Err(PgeeError::ZeroSe)));
}
