//! Multi-restart orchestration across candidate cluster counts, AIC/BIC,
//! and elbow-based selection of K.

use rayon::prelude::*;

use crate::data::EmData;
use crate::em::{run_em, EmOptions, FitResult};
use crate::error::{Error, Result};
use crate::init::{init_kmeans, init_random, InitMethod};
use crate::params::Variant;

/// A grid of (K, init method, restart) fits to run and reduce.
#[derive(Debug, Clone)]
pub struct RestartPlan {
    pub variant: Variant,
    pub k_values: Vec<usize>,
    /// Independent EM runs per (K, method); seeds are `base_seed + i`.
    pub restarts: usize,
    pub init_methods: Vec<InitMethod>,
    pub base_seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl RestartPlan {
    pub fn new(variant: Variant, k_values: Vec<usize>) -> Self {
        Self {
            variant,
            k_values,
            restarts: 32,
            init_methods: vec![InitMethod::Kmeans, InitMethod::Random],
            base_seed: 0,
            tol: 1e-6,
            max_iter: 1000,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::Domain(
                "k_values must be non-empty, each >= 1".into(),
            ));
        }
        let mut sorted = self.k_values.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.k_values.len() {
            return Err(Error::Domain("k_values must be distinct".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Domain("restarts must be >= 1".into()));
        }
        if self.init_methods.is_empty() {
            return Err(Error::Domain("need at least one init method".into()));
        }
        Ok(())
    }
}

/// Number of free parameters of a fitted variant.
///
/// The (K-1) mixture weights, K zero-inflation probabilities, and K rates
/// per gene (the constrained (beta0, rho) pair is worth K free values per
/// gene); regression variants add G*P covariate slopes and NB variants K
/// dispersions.
pub fn param_count(variant: Variant, k: usize, g: usize, p: usize) -> usize {
    let base = (k - 1) + k + k * g;
    match variant {
        Variant::Zip => base,
        Variant::ZipReg => base + g * p,
        Variant::Zinb => base + k,
        Variant::ZinbReg => base + g * p + k,
    }
}

/// AIC = 2p - 2 loglik.
pub fn aic(fit: &FitResult) -> Result<f64> {
    let ll = fit.loglik();
    if !ll.is_finite() {
        return Err(Error::Numerical(format!("log-likelihood {ll} in AIC")));
    }
    let p = param_count(
        fit.params.variant(),
        fit.params.n_clusters(),
        fit.params.n_genes(),
        fit.params.n_covariates(),
    );
    Ok(2.0 * p as f64 - 2.0 * ll)
}

/// BIC = p log N - 2 loglik.
pub fn bic(fit: &FitResult) -> Result<f64> {
    let ll = fit.loglik();
    if !ll.is_finite() {
        return Err(Error::Numerical(format!("log-likelihood {ll} in BIC")));
    }
    let n = fit.z_hat.nrows();
    let p = param_count(
        fit.params.variant(),
        fit.params.n_clusters(),
        fit.params.n_genes(),
        fit.params.n_covariates(),
    );
    Ok(p as f64 * (n as f64).ln() - 2.0 * ll)
}

/// Result of an elbow pass over a K -> AIC curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElbowChoice {
    pub k: usize,
    /// Set when the curve had a single point.
    pub degenerate: bool,
    /// Set when the curve is not non-increasing in K.
    pub non_monotone: bool,
}

/// Pick K by the elbow rule: draw the line from the highest-AIC point to
/// the largest-K point and return the K with the greatest vertical distance
/// below it. Ties break to the smaller K; points above the line are
/// ineligible. When both anchors coincide the line degenerates to the
/// horizontal through that point.
pub fn elbow_select(curve: &[(usize, f64)]) -> Result<ElbowChoice> {
    if curve.is_empty() {
        return Err(Error::Domain("empty AIC curve".into()));
    }
    if curve.iter().any(|&(_, a)| !a.is_finite()) {
        return Err(Error::Numerical("non-finite AIC in curve".into()));
    }
    let mut pts = curve.to_vec();
    pts.sort_by_key(|&(k, _)| k);
    if pts.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Domain("duplicate K in curve".into()));
    }
    if pts.len() == 1 {
        return Ok(ElbowChoice {
            k: pts[0].0,
            degenerate: true,
            non_monotone: false,
        });
    }
    let non_monotone = pts.windows(2).any(|w| w[1].1 > w[0].1);
    // Highest-AIC anchor; ties to the smaller K.
    let (k_top, a_top) = pts
        .iter()
        .copied()
        .fold(None::<(usize, f64)>, |best, (k, a)| match best {
            None => Some((k, a)),
            Some((bk, ba)) => {
                if a > ba || (a == ba && k < bk) {
                    Some((k, a))
                } else {
                    Some((bk, ba))
                }
            }
        })
        .unwrap();
    let (k_end, a_end) = *pts.last().unwrap();
    let line = |k: usize| -> f64 {
        if k_top == k_end {
            a_top
        } else {
            a_top + (a_end - a_top) * (k as f64 - k_top as f64) / (k_end as f64 - k_top as f64)
        }
    };
    let mut best: Option<(f64, usize)> = None;
    for &(k, a) in &pts {
        let dist = line(k) - a;
        if dist < -1e-9 {
            continue; // above the line
        }
        best = match best {
            None => Some((dist, k)),
            Some((bd, bk)) => {
                if dist > bd || (dist == bd && k < bk) {
                    Some((dist, k))
                } else {
                    Some((bd, bk))
                }
            }
        };
    }
    Ok(ElbowChoice {
        k: best.expect("anchors are eligible").1,
        degenerate: false,
        non_monotone,
    })
}

/// Outcome of a single restart, kept for the report even when it failed.
#[derive(Debug, Clone)]
pub struct RestartRecord {
    pub seed: u64,
    pub loglik: Option<f64>,
    pub aic: Option<f64>,
    pub converged: Option<bool>,
    pub n_iter: Option<usize>,
    pub error: Option<String>,
}

/// Restart grid cell: all runs of one (K, method) pair and the best fit.
#[derive(Debug, Clone)]
pub struct SelectionCell {
    pub k: usize,
    pub method: InitMethod,
    pub runs: Vec<RestartRecord>,
    pub best_aic: Option<f64>,
    pub best: Option<FitResult>,
}

/// Full record of a selection run.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    /// Ordered by (method, K) following the plan.
    pub cells: Vec<SelectionCell>,
    pub elbow: Vec<(InitMethod, ElbowChoice)>,
    pub chosen_k: usize,
    pub chosen_method: InitMethod,
    pub chosen_aic: f64,
}

impl SelectionReport {
    pub fn cell(&self, method: InitMethod, k: usize) -> Option<&SelectionCell> {
        self.cells.iter().find(|c| c.method == method && c.k == k)
    }

    /// The fit behind the final choice.
    pub fn chosen_fit(&self) -> &FitResult {
        self.cell(self.chosen_method, self.chosen_k)
            .and_then(|c| c.best.as_ref())
            .expect("chosen cell has a fit")
    }
}

/// Run the full restart grid, reduce each cell to its best-AIC fit, pick K
/// per method by the elbow rule, and choose the final fit as the elbow
/// winner with the smaller AIC (ties: kmeans first).
pub fn run_selection(data: &EmData, plan: &RestartPlan) -> Result<SelectionReport> {
    plan.validate()?;
    data.validate()?;
    let opts = EmOptions {
        tol: plan.tol,
        max_iter: plan.max_iter,
        update_dispersion: true,
    };

    let jobs: Vec<(InitMethod, usize, u64)> = plan
        .init_methods
        .iter()
        .flat_map(|&method| {
            plan.k_values.iter().flat_map(move |&k| {
                (0..plan.restarts).map(move |i| (method, k, plan.base_seed + i as u64))
            })
        })
        .collect();

    let outcomes: Vec<std::result::Result<FitResult, String>> = jobs
        .par_iter()
        .map(|&(method, k, seed)| {
            let init = match method {
                InitMethod::Kmeans => init_kmeans(data, k, seed, plan.variant),
                InitMethod::Random => init_random(data, k, seed, plan.variant),
            };
            init.and_then(|p| run_em(p, data, &opts))
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut cells = Vec::new();
    let mut idx = 0;
    for &method in &plan.init_methods {
        for &k in &plan.k_values {
            let mut runs = Vec::with_capacity(plan.restarts);
            let mut best: Option<(f64, u64, FitResult)> = None;
            for i in 0..plan.restarts {
                let seed = plan.base_seed + i as u64;
                match &outcomes[idx] {
                    Ok(fit) => {
                        let a = aic(fit)?;
                        runs.push(RestartRecord {
                            seed,
                            loglik: Some(fit.loglik()),
                            aic: Some(a),
                            converged: Some(fit.converged),
                            n_iter: Some(fit.n_iter),
                            error: None,
                        });
                        // Strict < keeps the lower seed on exact ties.
                        let better = match &best {
                            None => true,
                            Some((ba, _, _)) => a < *ba,
                        };
                        if better {
                            best = Some((a, seed, fit.clone()));
                        }
                    }
                    Err(msg) => runs.push(RestartRecord {
                        seed,
                        loglik: None,
                        aic: None,
                        converged: None,
                        n_iter: None,
                        error: Some(msg.clone()),
                    }),
                }
                idx += 1;
            }
            let (best_aic, best_fit) = match best {
                Some((a, _, fit)) => (Some(a), Some(fit)),
                None => (None, None),
            };
            cells.push(SelectionCell {
                k,
                method,
                runs,
                best_aic,
                best: best_fit,
            });
        }
    }

    let mut elbow = Vec::new();
    let mut winners: Vec<(InitMethod, usize, f64)> = Vec::new();
    for &method in &plan.init_methods {
        let curve: Vec<(usize, f64)> = cells
            .iter()
            .filter(|c| c.method == method && c.best_aic.is_some())
            .map(|c| (c.k, c.best_aic.unwrap()))
            .collect();
        if curve.is_empty() {
            continue;
        }
        let choice = elbow_select(&curve)?;
        let winner_aic = curve
            .iter()
            .find(|&&(k, _)| k == choice.k)
            .map(|&(_, a)| a)
            .unwrap();
        elbow.push((method, choice));
        winners.push((method, choice.k, winner_aic));
    }
    if winners.is_empty() {
        return Err(Error::Selection(
            "every restart failed in every (K, method) cell".into(),
        ));
    }
    // Smaller AIC wins; exact ties go to the earlier method (kmeans first
    // when both are planned).
    let mut chosen = winners[0];
    for &w in &winners[1..] {
        if w.2 < chosen.2 {
            chosen = w;
        }
    }
    Ok(SelectionReport {
        cells,
        elbow,
        chosen_k: chosen.1,
        chosen_method: chosen.0,
        chosen_aic: chosen.2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CountMatrix;
    use crate::em::e_step;
    use crate::params::{ModelParams, ZipParams};
    use ndarray::{array, Array2};

    #[test]
    fn param_counts_by_variant() {
        assert_eq!(param_count(Variant::Zip, 3, 120, 0), 2 + 3 + 360);
        assert_eq!(param_count(Variant::Zinb, 3, 120, 0), 2 + 3 + 360 + 3);
        assert_eq!(param_count(Variant::ZipReg, 2, 10, 2), 1 + 2 + 20 + 20);
        assert_eq!(param_count(Variant::ZinbReg, 2, 10, 1), 1 + 2 + 20 + 10 + 2);
    }

    fn tiny_fit(ll: f64, k: usize, g: usize, n: usize) -> FitResult {
        FitResult {
            params: ModelParams::Zip(ZipParams {
                pi: ndarray::Array1::from_elem(k, 1.0 / k as f64),
                phi: ndarray::Array1::zeros(k),
                lambda: Array2::from_elem((k, g), 1.0),
            }),
            loglik_trace: vec![ll],
            n_iter: 1,
            converged: true,
            z_hat: Array2::from_elem((n, k), 1.0 / k as f64),
            labels: vec![0; n],
        }
    }

    #[test]
    fn aic_and_bic_reference_values() {
        // p = (K-1) + K + K*G = 0 + 1 + 1 = 2 for K=1, G=1; choose shapes so
        // the formulas are easy to check by hand.
        let fit = tiny_fit(0.0, 1, 1, 8);
        assert_eq!(param_count(Variant::Zip, 1, 1, 0), 2);
        assert!((aic(&fit).unwrap() - 4.0).abs() < 1e-12);
        assert!((bic(&fit).unwrap() - 2.0 * 8.0f64.ln()).abs() < 1e-12);
        // BIC > AIC whenever log N > 2.
        let fit = tiny_fit(-5.0, 2, 3, 20);
        assert!(bic(&fit).unwrap() > aic(&fit).unwrap());
    }

    #[test]
    fn aic_single_cluster_matches_closed_form_mle() {
        // K = 1 ZIP on data without zeros: MLE is phi = 0, lambda = mean.
        let counts = CountMatrix::with_default_ids(array![[2u32], [4], [3]]).unwrap();
        let data = crate::data::EmData::new(&counts);
        let init = ModelParams::Zip(ZipParams {
            pi: array![1.0],
            phi: array![0.0],
            lambda: array![[1.0]],
        });
        let fit = crate::em::run_em(init, &data, &crate::em::EmOptions::default()).unwrap();
        let lam = 3.0f64;
        let ll_mle: f64 = [2u32, 4, 3]
            .iter()
            .map(|&y| crate::kernels::zip_log_pmf(y, lam, 0.0).unwrap())
            .sum();
        let p = param_count(Variant::Zip, 1, 1, 0) as f64;
        assert!((aic(&fit).unwrap() - (2.0 * p - 2.0 * ll_mle)).abs() < 1e-9);
        let _ = e_step(&fit.params, &data).unwrap();
    }

    #[test]
    fn aic_and_bic_rank_equal_complexity_fits_identically() {
        let fits: Vec<FitResult> = [-10.0, -25.0, -3.0, -17.0]
            .iter()
            .map(|&ll| tiny_fit(ll, 2, 3, 30))
            .collect();
        let mut by_aic: Vec<usize> = (0..4).collect();
        by_aic.sort_by(|&a, &b| {
            aic(&fits[a])
                .unwrap()
                .partial_cmp(&aic(&fits[b]).unwrap())
                .unwrap()
        });
        let mut by_bic: Vec<usize> = (0..4).collect();
        by_bic.sort_by(|&a, &b| {
            bic(&fits[a])
                .unwrap()
                .partial_cmp(&bic(&fits[b]).unwrap())
                .unwrap()
        });
        assert_eq!(by_aic, by_bic);
    }

    #[test]
    fn elbow_hand_checked_curve() {
        // Line from (1, 100) to (4, 34); distances below: K=2 -> 38, K=3 -> 21.
        let curve = [(1usize, 100.0), (2, 40.0), (3, 35.0), (4, 34.0)];
        let choice = elbow_select(&curve).unwrap();
        assert_eq!(choice.k, 2);
        assert!(!choice.degenerate);
        assert!(!choice.non_monotone);
    }

    #[test]
    fn elbow_collinear_curve_ties_to_smallest_k() {
        let curve = [(1usize, 90.0), (2, 60.0), (3, 30.0), (4, 0.0)];
        assert_eq!(elbow_select(&curve).unwrap().k, 1);
    }

    #[test]
    fn elbow_increasing_curve_returns_first_point() {
        let curve = [(1usize, 10.0), (2, 20.0), (3, 30.0)];
        let choice = elbow_select(&curve).unwrap();
        assert_eq!(choice.k, 1);
        assert!(choice.non_monotone);
    }

    #[test]
    fn elbow_single_point_is_degenerate() {
        let choice = elbow_select(&[(3usize, 42.0)]).unwrap();
        assert_eq!(choice.k, 3);
        assert!(choice.degenerate);
    }

    #[test]
    fn elbow_invariant_to_aic_shift() {
        let curve = [(1usize, 100.0), (2, 40.0), (3, 35.0), (4, 34.0)];
        let shifted: Vec<(usize, f64)> = curve.iter().map(|&(k, a)| (k, a + 1234.5)).collect();
        assert_eq!(
            elbow_select(&curve).unwrap().k,
            elbow_select(&shifted).unwrap().k
        );
    }

    fn blob_matrix() -> CountMatrix {
        let mut flat = Vec::new();
        for i in 0..36u32 {
            if i < 18 {
                flat.extend_from_slice(&[1 + (i % 2), 0, 2, 1]);
            } else {
                flat.extend_from_slice(&[15, 12 + (i % 3), 18, 14]);
            }
        }
        CountMatrix::with_default_ids(Array2::from_shape_vec((36, 4), flat).unwrap()).unwrap()
    }

    #[test]
    fn selection_single_cell_plan_returns_that_fit() {
        let m = blob_matrix();
        let data = crate::data::EmData::new(&m);
        let mut plan = RestartPlan::new(Variant::Zip, vec![2]);
        plan.restarts = 1;
        plan.init_methods = vec![InitMethod::Kmeans];
        plan.base_seed = 5;
        let report = run_selection(&data, &plan).unwrap();
        assert_eq!(report.cells.len(), 1);
        assert_eq!(report.chosen_k, 2);
        assert_eq!(report.chosen_method, InitMethod::Kmeans);
        let cell = report.cell(InitMethod::Kmeans, 2).unwrap();
        assert_eq!(cell.runs.len(), 1);
        assert_eq!(cell.best_aic, Some(report.chosen_aic));
        assert_eq!(report.chosen_fit().params.n_clusters(), 2);
    }

    #[test]
    fn selection_is_deterministic_across_runs() {
        let m = blob_matrix();
        let data = crate::data::EmData::new(&m);
        let mut plan = RestartPlan::new(Variant::Zip, vec![1, 2, 3]);
        plan.restarts = 3;
        plan.base_seed = 17;
        let a = run_selection(&data, &plan).unwrap();
        let b = run_selection(&data, &plan).unwrap();
        assert_eq!(a.chosen_k, b.chosen_k);
        assert_eq!(a.chosen_method, b.chosen_method);
        assert_eq!(a.chosen_aic, b.chosen_aic);
        for (ca, cb) in a.cells.iter().zip(&b.cells) {
            assert_eq!(ca.best_aic, cb.best_aic);
            let lls_a: Vec<_> = ca.runs.iter().map(|r| r.loglik).collect();
            let lls_b: Vec<_> = cb.runs.iter().map(|r| r.loglik).collect();
            assert_eq!(lls_a, lls_b);
        }
    }
}
