#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pgee_core::{Cluster, Dataset, INTERCEPT_NAME};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Clusters with an intercept, a cluster-level binary covariate and a
/// continuous within-cluster covariate; outcomes drawn independently from
/// the logistic model at `beta`.
pub fn logistic_dataset(seed: u64, n_clusters: usize, sizes: &[usize], beta: &[f64]) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = (0..n_clusters)
        .map(|i| {
            let n = sizes[i % sizes.len()];
            let trt = (i % 2) as f64;
            let x = DMatrix::from_fn(n, 3, |j, k| match k {
                0 => 1.0,
                1 => trt,
                _ => 0.2 * (j + 1) as f64 + rng.random_range(-0.1..0.1),
            });
            let y = DVector::from_fn(n, |j, _| {
                let eta: f64 = (0..3).map(|k| x[(j, k)] * beta[k]).sum();
                let mu = 1.0 / (1.0 + (-eta).exp());
                if rng.random_bool(mu) {
                    1.0
                } else {
                    0.0
                }
            });
            Cluster::new(format!("s{i}"), y, x, None).unwrap()
        })
        .collect();
    Dataset::new(clusters, vec![INTERCEPT_NAME.into(), "trt".into(), "t".into()]).unwrap()
}

pub fn duplicate(data: &Dataset, m: usize) -> Dataset {
    let clusters = (0..m)
        .flat_map(|rep| {
            data.clusters()
                .iter()
                .map(move |c| Cluster::new(format!("{}#{rep}", c.id()), c.y().clone(), c.x().clone(), None).unwrap())
        })
        .collect();
    Dataset::new(clusters, data.covariate_names().to_vec()).unwrap()
}
