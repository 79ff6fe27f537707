use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{PgeeError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldResult {
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub dof: usize,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl WaldResult {
    pub fn rejects(&self, level: f64) -> bool {
        self.p_value < level
    }
}

fn t_dist(dof: usize) -> StudentsT {
    StudentsT::new(0.0, 1.0, dof as f64).expect("positive degrees of freedom")
}

/// Two-sided t test of `beta_s = null_value` with `N - p` degrees of freedom.
pub fn wald_test(beta_s: f64, se_s: f64, n_clusters: usize, p: usize, null_value: f64) -> Result<WaldResult> {
    if !(se_s > 0.0) || !se_s.is_finite() {
        return Err(PgeeError::ZeroSe);
    }
    if n_clusters <= p {
        return Err(PgeeError::TooFewClusters {
            clusters: n_clusters,
            required: p + 1,
        });
    }
    let dof = n_clusters - p;
    let dist = t_dist(dof);
    let t = (beta_s - null_value) / se_s;
    let p_value = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    let q = t_critical(dof);
    Ok(WaldResult {
        estimate: beta_s,
        se: se_s,
        t,
        dof,
        p_value,
        ci_low: beta_s - q * se_s,
        ci_high: beta_s + q * se_s,
    })
}

/// Two-sided 95% critical value of the t distribution.
pub fn t_critical(dof: usize) -> f64 {
    t_dist(dof).inverse_cdf(0.975)
}
