//! K-means and random initialization of the mixture parameters.
//!
//! Both methods produce an initial hard clustering and then derive the same
//! parameter set from it: cluster proportions for pi, per-cluster zero
//! fractions for phi, per-cluster gene means for the rates (log-transformed
//! free coefficients for the regression variants), and a moment estimate for
//! the NB size.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::EmData;
use crate::error::{Error, Result};
use crate::glm::reparameterize;
use crate::params::{ModelParams, RegParams, Variant, ZinbParams, ZipParams};

/// Lloyd iteration cap of the k-means initializer.
const KMEANS_ITER: usize = 25;
/// Floor applied to cluster gene means before use as rates or logs.
const MEAN_FLOOR: f64 = 1e-6;
/// Clamp range of the moment-based initial NB size.
const NU_RANGE: (f64, f64) = (0.01, 1e4);

/// Initialization family used for a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    Kmeans,
    Random,
}

impl std::fmt::Display for InitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitMethod::Kmeans => "kmeans",
            InitMethod::Random => "random",
        })
    }
}

/// Initialize by running k-means (Lloyd, k-means++ seeding) on log1p
/// counts, then deriving parameters from the hard labels.
///
/// An empty k-means cluster triggers one reseeded retry before failing.
pub fn init_kmeans(data: &EmData, k: usize, seed: u64, variant: Variant) -> Result<ModelParams> {
    check_k(data, k)?;
    let features = log1p_features(data);
    let labels = match kmeans_labels(&features, k, seed) {
        Ok(l) => l,
        Err(Error::EmptyCluster { .. }) => kmeans_labels(&features, k, reseed(seed))?,
        Err(e) => return Err(e),
    };
    params_from_labels(data, &labels, k, variant)
}

/// Initialize from a balanced random clustering: a shuffled round-robin
/// assignment, so every cluster receives at least one cell whenever K <= N
/// and the label distribution is uniform.
pub fn init_random(data: &EmData, k: usize, seed: u64, variant: Variant) -> Result<ModelParams> {
    check_k(data, k)?;
    let n = data.n_cells();
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    params_from_labels(data, &labels, k, variant)
}

fn check_k(data: &EmData, k: usize) -> Result<()> {
    data.validate()?;
    if k == 0 || k > data.n_cells() {
        return Err(Error::Dimension(format!(
            "K = {k} outside 1..={}",
            data.n_cells()
        )));
    }
    Ok(())
}

fn reseed(seed: u64) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15)
}

fn log1p_features(data: &EmData) -> Array2<f64> {
    data.counts.counts().mapv(|y| f64::from(y).ln_1p())
}

fn squared_distance(a: ndarray::ArrayView1<f64>, b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn kmeans_labels(features: &Array2<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let (n, g) = features.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding: first center uniform, the rest by squared-distance
    // weighted draws.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(features.row(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(features.row(i), &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // All points coincide with a chosen center; fall back to uniform.
            rng.random_range(0..n)
        };
        centers.push(features.row(idx).to_vec());
        for (i, slot) in d2.iter_mut().enumerate() {
            let d = squared_distance(features.row(i), centers.last().unwrap());
            if d < *slot {
                *slot = d;
            }
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..KMEANS_ITER {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = squared_distance(features.row(i), center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; g]; k];
        let mut sizes = vec![0usize; k];
        for (i, &label) in labels.iter().enumerate() {
            sizes[label] += 1;
            for t in 0..g {
                sums[label][t] += features[[i, t]];
            }
        }
        for c in 0..k {
            // A center with no points keeps its position for this round.
            if sizes[c] > 0 {
                for t in 0..g {
                    centers[c][t] = sums[c][t] / sizes[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut sizes = vec![0usize; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    if let Some(cluster) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyCluster {
            cluster,
            iteration: None,
        });
    }
    Ok(labels)
}

/// Derive initial parameters from hard labels, shared by both methods.
fn params_from_labels(
    data: &EmData,
    labels: &[usize],
    k: usize,
    variant: Variant,
) -> Result<ModelParams> {
    let counts = data.counts.counts();
    let (n, g) = counts.dim();
    let mut sizes = vec![0usize; k];
    let mut zero_counts = vec![0u64; k];
    let mut gene_sums = Array2::<f64>::zeros((k, g));
    // Accumulators over all counts of a cluster for the NB moment formula.
    let mut tot_sum = vec![0.0f64; k];
    let mut tot_sumsq = vec![0.0f64; k];
    for (i, &l) in labels.iter().enumerate() {
        sizes[l] += 1;
        for t in 0..g {
            let y = f64::from(counts[[i, t]]);
            gene_sums[[l, t]] += y;
            tot_sum[l] += y;
            tot_sumsq[l] += y * y;
            if counts[[i, t]] == 0 {
                zero_counts[l] += 1;
            }
        }
    }
    if let Some(cluster) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyCluster {
            cluster,
            iteration: None,
        });
    }

    let pi = Array1::from_iter(sizes.iter().map(|&s| s as f64 / n as f64));
    let phi = Array1::from_iter(
        zero_counts
            .iter()
            .zip(&sizes)
            .map(|(&z, &s)| (z as f64 / (s as f64 * g as f64)).min(1.0 - 1e-12)),
    );
    let mut means = gene_sums;
    for c in 0..k {
        for t in 0..g {
            means[[c, t]] = (means[[c, t]] / sizes[c] as f64).max(MEAN_FLOOR);
        }
    }

    // nu0 = [(sigma/mean)^2 - 1/mean]^-1 over all counts of the cluster.
    let nu0 = |c: usize| -> f64 {
        let m = sizes[c] as f64 * g as f64;
        let mean = tot_sum[c] / m;
        let var = if m > 1.0 {
            (tot_sumsq[c] - m * mean * mean) / (m - 1.0)
        } else {
            0.0
        };
        if mean <= 0.0 {
            return NU_RANGE.1;
        }
        let denom = var / (mean * mean) - 1.0 / mean;
        let nu = if denom > 0.0 { 1.0 / denom } else { NU_RANGE.1 };
        nu.clamp(NU_RANGE.0, NU_RANGE.1)
    };

    match variant {
        Variant::Zip => Ok(ModelParams::Zip(ZipParams {
            pi,
            phi,
            lambda: means,
        })),
        Variant::Zinb => {
            let alpha = Array1::from_iter((0..k).map(|c| 1.0 / nu0(c)));
            Ok(ModelParams::Zinb(ZinbParams {
                pi,
                phi,
                mu: means,
                alpha,
            }))
        }
        Variant::ZipReg | Variant::ZinbReg => {
            // Free coefficients log of the exposure-weighted cluster mean
            // (sum of counts over the cluster's size-factor total, which is
            // the plain gene mean when T = 1), recentred so the cluster
            // effects satisfy the per-gene zero-sum constraint while the
            // implied rates stay unchanged.
            let p = data.n_covariates();
            let mut t_totals = vec![0.0f64; k];
            match data.size_factors {
                Some(sf) => {
                    for (i, &l) in labels.iter().enumerate() {
                        t_totals[l] += sf.values()[i];
                    }
                }
                None => {
                    for (c, &s) in sizes.iter().enumerate() {
                        t_totals[c] = s as f64;
                    }
                }
            }
            let mut beta0 = Array1::zeros(g);
            let mut rho = Array2::zeros((g, k));
            for t in 0..g {
                let free: Vec<f64> = (0..k)
                    .map(|c| {
                        let exposure_mean = means[[c, t]] * sizes[c] as f64 / t_totals[c];
                        exposure_mean.max(MEAN_FLOOR).ln()
                    })
                    .collect();
                let (b0, r) = reparameterize(&free);
                beta0[t] = b0;
                for c in 0..k {
                    rho[[t, c]] = r[c];
                }
            }
            let alpha = if variant == Variant::ZinbReg {
                Some(Array1::from_iter((0..k).map(|c| 1.0 / nu0(c))))
            } else {
                None
            };
            let params = RegParams {
                pi,
                phi,
                beta0,
                rho,
                beta: Array2::zeros((g, p)),
                alpha,
            };
            Ok(match variant {
                Variant::ZipReg => ModelParams::ZipReg(params),
                _ => ModelParams::ZinbReg(params),
            })
        }
    }
}
