//! Evaluation metrics for simulation studies: cluster-label alignment,
//! V-measure, per-cluster MSE/MAD of the rate parameters, and confusion /
//! co-clustering tables.

use std::collections::BTreeMap;

use itertools::Itertools;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::params::ModelParams;

/// Contingency table between two labelings.
///
/// Returns the sorted distinct labels of each argument and the count matrix
/// (rows follow the first labeling).
pub fn confusion_matrix(
    rows: &[usize],
    cols: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, Array2<u64>)> {
    if rows.len() != cols.len() || rows.is_empty() {
        return Err(Error::Dimension(format!(
            "labelings of length {} and {} cannot be crossed",
            rows.len(),
            cols.len()
        )));
    }
    let mut row_ids: Vec<usize> = rows.to_vec();
    row_ids.sort_unstable();
    row_ids.dedup();
    let mut col_ids: Vec<usize> = cols.to_vec();
    col_ids.sort_unstable();
    col_ids.dedup();
    let row_pos: BTreeMap<usize, usize> =
        row_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let col_pos: BTreeMap<usize, usize> =
        col_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut m = Array2::<u64>::zeros((row_ids.len(), col_ids.len()));
    for (&r, &c) in rows.iter().zip(cols) {
        m[[row_pos[&r], col_pos[&c]]] += 1;
    }
    Ok((row_ids, col_ids, m))
}

/// Match estimated clusters to true ones on a square confusion matrix.
///
/// Returns the permutation `perm` maximizing the matched diagonal
/// `sum_i confusion[i, perm[i]]`; `perm[i]` is the estimated cluster paired
/// with true cluster `i`. Ties resolve to the lexicographically smallest
/// permutation. Exhaustive (exact) up to K = 10; beyond that a greedy
/// assignment is used.
pub fn align_labels(confusion: &Array2<u64>) -> Result<Vec<usize>> {
    let (k, k2) = confusion.dim();
    if k != k2 || k == 0 {
        return Err(Error::Dimension(format!(
            "confusion matrix must be square and non-empty, got {k} x {k2}"
        )));
    }
    if k <= 10 {
        let mut best: Option<(u64, Vec<usize>)> = None;
        for perm in (0..k).permutations(k) {
            let s: u64 = (0..k).map(|i| confusion[[i, perm[i]]]).sum();
            // Strict > keeps the first (lexicographically smallest) argmax.
            let better = match &best {
                None => true,
                Some((bs, _)) => s > *bs,
            };
            if better {
                best = Some((s, perm));
            }
        }
        Ok(best.unwrap().1)
    } else {
        let mut perm = vec![usize::MAX; k];
        let mut row_used = vec![false; k];
        let mut col_used = vec![false; k];
        for _ in 0..k {
            let mut top: Option<(u64, usize, usize)> = None;
            for i in 0..k {
                if row_used[i] {
                    continue;
                }
                for j in 0..k {
                    if col_used[j] {
                        continue;
                    }
                    let v = confusion[[i, j]];
                    if top.is_none_or(|(bv, _, _)| v > bv) {
                        top = Some((v, i, j));
                    }
                }
            }
            let (_, i, j) = top.unwrap();
            perm[i] = j;
            row_used[i] = true;
            col_used[j] = true;
        }
        Ok(perm)
    }
}

fn entropy(counts: &[u64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// V-measure: the harmonic mean of homogeneity and completeness.
///
/// Degenerate entropies follow the usual conventions: a single true class
/// (or single predicted cluster) contributes a score of one; when both
/// components vanish the measure is zero.
pub fn v_measure(true_labels: &[usize], pred_labels: &[usize]) -> Result<f64> {
    let (_, _, joint) = confusion_matrix(true_labels, pred_labels)?;
    let n = true_labels.len() as f64;
    let (rc, cc) = joint.dim();
    let row_sums: Vec<u64> = (0..rc).map(|i| joint.row(i).sum()).collect();
    let col_sums: Vec<u64> = (0..cc).map(|j| joint.column(j).sum()).collect();
    let h_true = entropy(&row_sums, n);
    let h_pred = entropy(&col_sums, n);
    // Conditional entropies from the joint distribution.
    let mut h_true_given_pred = 0.0;
    let mut h_pred_given_true = 0.0;
    for i in 0..rc {
        for j in 0..cc {
            let c = joint[[i, j]];
            if c == 0 {
                continue;
            }
            let p = c as f64 / n;
            h_true_given_pred -= p * (c as f64 / col_sums[j] as f64).ln();
            h_pred_given_true -= p * (c as f64 / row_sums[i] as f64).ln();
        }
    }
    let homogeneity = if h_true > 0.0 {
        1.0 - h_true_given_pred / h_true
    } else {
        1.0
    };
    let completeness = if h_pred > 0.0 {
        1.0 - h_pred_given_true / h_pred
    } else {
        1.0
    };
    if homogeneity + completeness == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * homogeneity * completeness / (homogeneity + completeness))
}

/// Per-cluster (and overall) estimation errors of the rate parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RateErrors {
    /// Indexed by true cluster: lambda/mu errors for the plain variants,
    /// rho errors for the regression variants.
    pub per_cluster: Vec<f64>,
    /// Baseline beta0 error; regression variants only.
    pub beta0: Option<f64>,
    /// Per-covariate slope errors; regression variants with P > 0.
    pub per_covariate: Option<Vec<f64>>,
}

/// A fitted replicate paired with its cluster alignment: `alignment[k]` is
/// the fitted cluster matched to true cluster `k`.
pub struct AlignedFit<'a> {
    pub params: &'a ModelParams,
    pub alignment: &'a [usize],
}

fn check_fit(truth: &ModelParams, fit: &AlignedFit) -> Result<()> {
    if fit.params.variant() != truth.variant() {
        return Err(Error::Dimension(format!(
            "variant mismatch: truth {}, fit {}",
            truth.variant(),
            fit.params.variant()
        )));
    }
    let k = truth.n_clusters();
    if fit.params.n_clusters() != k
        || fit.params.n_genes() != truth.n_genes()
        || fit.params.n_covariates() != truth.n_covariates()
    {
        return Err(Error::Dimension("truth/fit shape mismatch".into()));
    }
    let mut seen = vec![false; k];
    if fit.alignment.len() != k {
        return Err(Error::Dimension("alignment length != K".into()));
    }
    for &j in fit.alignment {
        if j >= k || seen[j] {
            return Err(Error::Dimension("alignment is not a permutation".into()));
        }
        seen[j] = true;
    }
    Ok(())
}

/// Per-entry error |truth - fit| streams for each compared block.
struct ErrorStreams {
    /// per_cluster[k][replicate][gene]
    per_cluster: Vec<Vec<Vec<f64>>>,
    /// beta0[replicate][gene]
    beta0: Option<Vec<Vec<f64>>>,
    /// per_cov[p][replicate][gene]
    per_cov: Option<Vec<Vec<Vec<f64>>>>,
}

fn error_streams(truth: &ModelParams, fits: &[AlignedFit]) -> Result<ErrorStreams> {
    if fits.is_empty() {
        return Err(Error::Dimension("no fitted replicates".into()));
    }
    let k = truth.n_clusters();
    let g = truth.n_genes();
    let p = truth.n_covariates();
    for fit in fits {
        check_fit(truth, fit)?;
    }
    let rate_of = |m: &ModelParams, cluster: usize, gene: usize| -> f64 {
        match m {
            ModelParams::Zip(z) => z.lambda[[cluster, gene]],
            ModelParams::Zinb(z) => z.mu[[cluster, gene]],
            ModelParams::ZipReg(r) | ModelParams::ZinbReg(r) => r.rho[[gene, cluster]],
        }
    };
    let mut per_cluster = vec![Vec::with_capacity(fits.len()); k];
    for fit in fits {
        for (c, stream) in per_cluster.iter_mut().enumerate() {
            let mapped = fit.alignment[c];
            let errs: Vec<f64> = (0..g)
                .map(|t| (rate_of(truth, c, t) - rate_of(fit.params, mapped, t)).abs())
                .collect();
            stream.push(errs);
        }
    }
    let is_reg = truth.as_reg().is_some();
    let beta0 = if is_reg {
        let tb = &truth.as_reg().unwrap().beta0;
        Some(
            fits.iter()
                .map(|fit| {
                    let fb = &fit.params.as_reg().unwrap().beta0;
                    (0..g).map(|t| (tb[t] - fb[t]).abs()).collect()
                })
                .collect(),
        )
    } else {
        None
    };
    let per_cov = if is_reg && p > 0 {
        let tbeta = &truth.as_reg().unwrap().beta;
        Some(
            (0..p)
                .map(|q| {
                    fits.iter()
                        .map(|fit| {
                            let fbeta = &fit.params.as_reg().unwrap().beta;
                            (0..g)
                                .map(|t| (tbeta[[t, q]] - fbeta[[t, q]]).abs())
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(ErrorStreams {
        per_cluster,
        beta0,
        per_cov,
    })
}

fn mean_sq(replicates: &[Vec<f64>]) -> f64 {
    let total: f64 = replicates
        .iter()
        .flat_map(|r| r.iter())
        .map(|e| e * e)
        .sum();
    let count: usize = replicates.iter().map(|r| r.len()).sum();
    total / count as f64
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median over replicates of the per-replicate median absolute error.
fn mad(replicates: &[Vec<f64>]) -> f64 {
    let mut per_rep: Vec<f64> = replicates.iter().map(|r| median(&mut r.clone())).collect();
    median(&mut per_rep)
}

/// Mean squared error of the rate parameters across replicates and genes:
/// per cluster for lambda/mu/rho, plus overall beta0 and per-covariate
/// errors for the regression variants.
pub fn mse_rates(truth: &ModelParams, fits: &[AlignedFit]) -> Result<RateErrors> {
    let streams = error_streams(truth, fits)?;
    Ok(RateErrors {
        per_cluster: streams.per_cluster.iter().map(|s| mean_sq(s)).collect(),
        beta0: streams.beta0.as_ref().map(|s| mean_sq(s)),
        per_covariate: streams
            .per_cov
            .as_ref()
            .map(|cov| cov.iter().map(|s| mean_sq(s)).collect()),
    })
}

/// Median absolute deviation of the rate parameters: the median over genes
/// within each replicate, then the median over replicates.
pub fn mad_rates(truth: &ModelParams, fits: &[AlignedFit]) -> Result<RateErrors> {
    let streams = error_streams(truth, fits)?;
    Ok(RateErrors {
        per_cluster: streams.per_cluster.iter().map(|s| mad(s)).collect(),
        beta0: streams.beta0.as_ref().map(|s| mad(s)),
        per_covariate: streams
            .per_cov
            .as_ref()
            .map(|cov| cov.iter().map(|s| mad(s)).collect()),
    })
}

/// Row-stochastic percentage matrix: entry (i, j) is the percentage of
/// group-i items falling in cluster j; rows sum to 100.
pub fn co_clustering(
    true_groups: &[usize],
    pred_labels: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, Array2<f64>)> {
    let (rows, cols, counts) = confusion_matrix(true_groups, pred_labels)?;
    let mut pct = Array2::<f64>::zeros(counts.dim());
    for i in 0..rows.len() {
        let total: u64 = counts.row(i).sum();
        for j in 0..cols.len() {
            pct[[i, j]] = 100.0 * counts[[i, j]] as f64 / total as f64;
        }
    }
    Ok((rows, cols, pct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ZipParams;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn align_identity_and_reversal() {
        let ident = array![[9u64, 1, 0], [0, 8, 1], [1, 0, 7]];
        assert_eq!(align_labels(&ident).unwrap(), vec![0, 1, 2]);
        let anti = array![[0u64, 0, 9], [0, 8, 0], [9, 0, 0]];
        assert_eq!(align_labels(&anti).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn align_matches_exhaustive_search() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let m = Array2::from_shape_fn((4, 4), |_| rng.random_range(0..30u64));
            let got = align_labels(&m).unwrap();
            // Independent recursive enumeration of all 4! assignments.
            fn rec(
                m: &Array2<u64>,
                row: usize,
                used: &mut Vec<bool>,
                cur: &mut Vec<usize>,
                best: &mut (u64, Vec<usize>),
            ) {
                if row == 4 {
                    let s: u64 = (0..4).map(|i| m[[i, cur[i]]]).sum();
                    if s > best.0 {
                        *best = (s, cur.clone());
                    }
                    return;
                }
                for j in 0..4 {
                    if !used[j] {
                        used[j] = true;
                        cur.push(j);
                        rec(m, row + 1, used, cur, best);
                        cur.pop();
                        used[j] = false;
                    }
                }
            }
            let mut best = (0u64, vec![]);
            rec(&m, 0, &mut vec![false; 4], &mut Vec::new(), &mut best);
            let got_sum: u64 = (0..4).map(|i| m[[i, got[i]]]).sum();
            assert_eq!(got_sum, best.0);
        }
    }

    #[test]
    fn align_of_identical_labelings_is_identity() {
        let labels = vec![0usize, 1, 2, 0, 1, 2, 2];
        let (_, _, m) = confusion_matrix(&labels, &labels).unwrap();
        assert_eq!(align_labels(&m).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn v_measure_reference_values() {
        let t = vec![0usize, 0, 1, 1];
        assert!((v_measure(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        // One constant cluster against two balanced classes: homogeneity 0.
        let pred = vec![3usize, 3, 3, 3];
        assert_eq!(v_measure(&t, &pred).unwrap(), 0.0);
    }

    #[test]
    fn v_measure_single_flip_matches_entropy_oracle() {
        // 100 points, 2 balanced classes, one point flipped.
        let mut truth = vec![0usize; 50];
        truth.extend(vec![1usize; 50]);
        let mut pred = truth.clone();
        pred[0] = 1;
        let got = v_measure(&truth, &pred).unwrap();
        // Direct entropy computation from the joint counts
        // [[49, 1], [0, 50]].
        let n = 100.0;
        let h = |ps: &[f64]| -> f64 {
            ps.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * (p / 1.0).ln())
                .sum::<f64>()
        };
        let h_c = h(&[0.5, 0.5]);
        let h_k = h(&[49.0 / n, 51.0 / n]);
        let h_c_given_k: f64 = -(49.0 / n) * (49.0f64 / 49.0).ln()
            - (1.0 / n) * (1.0f64 / 51.0).ln()
            - (50.0 / n) * (50.0f64 / 51.0).ln();
        let h_k_given_c: f64 = -(49.0 / n) * (49.0f64 / 50.0).ln()
            - (1.0 / n) * (1.0f64 / 50.0).ln()
            - (50.0 / n) * (50.0f64 / 50.0).ln();
        let hom = 1.0 - h_c_given_k / h_c;
        let com = 1.0 - h_k_given_c / h_k;
        let expect = 2.0 * hom * com / (hom + com);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    fn zip_truth() -> ModelParams {
        ModelParams::Zip(ZipParams {
            pi: array![0.5, 0.5],
            phi: array![0.1, 0.1],
            lambda: array![[5.0, 10.0], [10.0, 5.0]],
        })
    }

    #[test]
    fn mse_zero_for_exact_estimates_and_square_for_errors() {
        let truth = zip_truth();
        let ident = vec![0usize, 1];
        let exact = mse_rates(
            &truth,
            &[AlignedFit {
                params: &truth,
                alignment: &ident,
            }],
        )
        .unwrap();
        assert_eq!(exact.per_cluster, vec![0.0, 0.0]);
        assert_eq!(exact.beta0, None);

        // Single replicate, error 0.1 on every entry -> MSE 0.01.
        let off = ModelParams::Zip(ZipParams {
            pi: array![0.5, 0.5],
            phi: array![0.1, 0.1],
            lambda: array![[5.1, 10.1], [10.1, 5.1]],
        });
        let got = mse_rates(
            &truth,
            &[AlignedFit {
                params: &off,
                alignment: &ident,
            }],
        )
        .unwrap();
        for v in got.per_cluster {
            assert!((v - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_invariant_under_joint_permutation() {
        let truth = zip_truth();
        let fit = ModelParams::Zip(ZipParams {
            pi: array![0.5, 0.5],
            phi: array![0.1, 0.1],
            lambda: array![[10.3, 5.2], [5.1, 9.8]],
        });
        // fit cluster 1 matches true 0 and vice versa.
        let aligned = mse_rates(
            &truth,
            &[AlignedFit {
                params: &fit,
                alignment: &[1, 0],
            }],
        )
        .unwrap();
        let swapped_fit = fit.permute_clusters(&[1, 0]);
        let direct = mse_rates(
            &truth,
            &[AlignedFit {
                params: &swapped_fit,
                alignment: &[0, 1],
            }],
        )
        .unwrap();
        for (a, b) in aligned.per_cluster.iter().zip(&direct.per_cluster) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mad_is_outlier_robust() {
        // Per-gene absolute errors {1, 2, 100} in a single replicate.
        let truth = ModelParams::Zip(ZipParams {
            pi: array![1.0],
            phi: array![0.0],
            lambda: array![[10.0, 10.0, 10.0]],
        });
        let fit = ModelParams::Zip(ZipParams {
            pi: array![1.0],
            phi: array![0.0],
            lambda: array![[11.0, 12.0, 110.0]],
        });
        let got = mad_rates(
            &truth,
            &[AlignedFit {
                params: &fit,
                alignment: &[0],
            }],
        )
        .unwrap();
        assert_eq!(got.per_cluster, vec![2.0]);
    }

    #[test]
    fn co_clustering_rows_are_percentages() {
        let truth = vec![0usize, 0, 0, 0, 1, 1];
        let pred = vec![5usize, 5, 7, 7, 7, 7];
        let (rows, cols, pct) = co_clustering(&truth, &pred).unwrap();
        assert_eq!(rows, vec![0, 1]);
        assert_eq!(cols, vec![5, 7]);
        assert_eq!(pct[[0, 0]], 50.0);
        assert_eq!(pct[[0, 1]], 50.0);
        assert_eq!(pct[[1, 0]], 0.0);
        assert_eq!(pct[[1, 1]], 100.0);
        for i in 0..2 {
            assert!((pct.row(i).sum() - 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn co_clustering_perfect_correspondence_is_permutation() {
        let truth = vec![0usize, 0, 1, 1, 2, 2];
        let pred = vec![2usize, 2, 0, 0, 1, 1];
        let (_, _, pct) = co_clustering(&truth, &pred).unwrap();
        for i in 0..3 {
            let ones: Vec<f64> = pct.row(i).iter().copied().filter(|&v| v > 0.0).collect();
            assert_eq!(ones, vec![100.0]);
        }
    }

    proptest! {
        #[test]
        fn v_measure_symmetric_under_relabeling(
            labels in proptest::collection::vec(0usize..4, 8..40),
            preds in proptest::collection::vec(0usize..4, 8..40),
        ) {
            let n = labels.len().min(preds.len());
            let t = &labels[..n];
            let p = &preds[..n];
            let v1 = v_measure(t, p).unwrap();
            // Relabel predictions by an arbitrary injective map.
            let relabeled: Vec<usize> = p.iter().map(|&x| 7 * x + 3).collect();
            let v2 = v_measure(t, &relabeled).unwrap();
            prop_assert!((v1 - v2).abs() < 1e-12);
        }
    }
}
