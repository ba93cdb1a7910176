//! E-step responsibilities, closed-form M-step updates, and EM/ECM
//! orchestration for all four model variants.
//!
//! Zero-state responsibilities are stored sparsely, keyed by the zero
//! entries of the count matrix; at non-zero counts they are identically
//! zero. NB variants run as ECM: (pi, phi), then rates/coefficients with the
//! dispersion held, then the dispersion with rates held at their fresh
//! update.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::data::EmData;
use crate::error::{Error, Result};
use crate::glm::{
    alpha_objective, fit_gene_nb, fit_gene_poisson, reparameterize, solve_alpha, GeneCoefficients,
    GeneRegressionProblem,
};
use crate::kernels::{evaluate, reg_rates_for_cluster, ZeroPattern};
use crate::params::{ModelParams, RegParams, ZinbParams, ZipParams};

/// Responsibility mass below which a cluster counts as empty.
const EMPTY_CLUSTER_TOL: f64 = 1e-12;
/// Floor applied to rate updates with vanishing effective weight.
const RATE_FLOOR: f64 = 1e-10;
/// phi is kept strictly below 1 so non-zero counts stay possible.
const PHI_CEIL: f64 = 1.0 - 1e-12;
/// Floor on the count-state weight used by the per-gene solvers.
const COUNT_STATE_FLOOR: f64 = 1e-12;

/// Zero-state responsibilities, defined at the zero entries of the data.
#[derive(Debug, Clone)]
pub struct ZeroResponsibilities {
    pattern: Arc<ZeroPattern>,
    values: Vec<f64>,
    k: usize,
}

impl ZeroResponsibilities {
    pub fn n_clusters(&self) -> usize {
        self.k
    }

    pub fn pattern(&self) -> &ZeroPattern {
        &self.pattern
    }

    /// Responsibility vector at entry (cell, gene); `None` where the count
    /// is non-zero (the implied value is the zero vector).
    pub fn get(&self, cell: usize, gene: usize) -> Option<&[f64]> {
        let genes = self.pattern.cell_genes(cell);
        let pos = genes.binary_search(&(gene as u32)).ok()?;
        let base = (self.pattern.cell_range(cell).start + pos) * self.k;
        Some(&self.values[base..base + self.k])
    }

    /// Iterate one cell's zero entries as (gene, responsibilities).
    pub fn cell_entries(&self, cell: usize) -> impl Iterator<Item = (usize, &[f64])> {
        let range = self.pattern.cell_range(cell);
        let genes = self.pattern.cell_genes(cell);
        genes.iter().enumerate().map(move |(i, &g)| {
            let base = (range.start + i) * self.k;
            (g as usize, &self.values[base..base + self.k])
        })
    }
}

/// Posterior cluster responsibilities and zero-state responsibilities.
#[derive(Debug, Clone)]
pub struct EStepResult {
    /// N x K; rows sum to one.
    pub z_hat: Array2<f64>,
    pub u_hat: ZeroResponsibilities,
}

/// Closed-form M-step output: mixture weights, zero-inflation, and the
/// weighted-mean rate update (lambda for ZIP, mu for ZINB).
#[derive(Debug, Clone)]
pub struct ClosedUpdates {
    pub pi: Array1<f64>,
    pub phi: Array1<f64>,
    /// K x G.
    pub rate: Array2<f64>,
}

/// Options of an EM run.
#[derive(Debug, Clone)]
pub struct EmOptions {
    /// Stop once the log-likelihood increase drops to this value or below.
    pub tol: f64,
    pub max_iter: usize,
    /// When false, NB dispersions stay at their initial values (diagnostic
    /// knob; used for Poisson-limit checks).
    pub update_dispersion: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 1000,
            update_dispersion: true,
        }
    }
}

impl EmOptions {
    fn validate(&self) -> Result<()> {
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(Error::Domain(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Domain("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// A converged (or iteration-capped) EM fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Observed log-likelihood at the initial parameters and after every
    /// iteration.
    pub loglik_trace: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
    pub z_hat: Array2<f64>,
    /// argmax_k z_hat per cell, ties to the lowest index.
    pub labels: Vec<usize>,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("non-empty trace")
    }
}

/// Compute responsibilities under the current parameters.
pub fn e_step(params: &ModelParams, data: &EmData) -> Result<EStepResult> {
    params.check_data(data)?;
    let pattern = Arc::new(ZeroPattern::build(data.counts.counts()));
    e_step_with(params, data, pattern)
}

fn e_step_with(
    params: &ModelParams,
    data: &EmData,
    pattern: Arc<ZeroPattern>,
) -> Result<EStepResult> {
    posterior(params, data, pattern).map(|(e, _)| e)
}

/// One density evaluation yields both the responsibilities and the observed
/// log-likelihood: the per-cell normalizer of the E-step is exactly the
/// cell's mixture log density.
fn posterior(
    params: &ModelParams,
    data: &EmData,
    pattern: Arc<ZeroPattern>,
) -> Result<(EStepResult, f64)> {
    let eval = evaluate(params, data, Some(&pattern))?;
    let (n, k) = eval.log_dens.dim();
    let ln_pi: Vec<f64> = params.pi().iter().map(|&p| p.ln()).collect();
    let mut z = eval.log_dens;
    let mut loglik = 0.0;
    for (i, mut row) in z.rows_mut().into_iter().enumerate() {
        let mut hi = f64::NEG_INFINITY;
        for (j, v) in row.iter_mut().enumerate() {
            *v += ln_pi[j];
            if *v > hi {
                hi = *v;
            }
        }
        if !hi.is_finite() {
            return Err(Error::Numerical(format!(
                "cell {i}: density vanished under every cluster"
            )));
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - hi).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        loglik += hi + sum.ln();
    }
    debug_assert_eq!(z.dim(), (n, k));
    let e = EStepResult {
        z_hat: z,
        u_hat: ZeroResponsibilities {
            pattern,
            values: eval.u.expect("u requested"),
            k,
        },
    };
    Ok((e, loglik))
}

/// Closed-form pi, phi, and weighted-mean rate updates.
pub fn m_step_closed(e: &EStepResult, data: &EmData) -> Result<ClosedUpdates> {
    let (pi, phi, mass) = m_step_pi_phi(e, data)?;
    let counts = data.counts.counts();
    let (n, g) = counts.dim();
    let k = e.z_hat.ncols();
    // Numerator sum_n z y is unaffected by u (y = 0 wherever u is defined);
    // the denominator subtracts the zero-state mass per (gene, cluster).
    let mut num = Array2::<f64>::zeros((k, g));
    let mut den = Array2::<f64>::zeros((k, g));
    for (j, &m) in mass.iter().enumerate() {
        den.row_mut(j).fill(m);
    }
    let mut yf = vec![0.0f64; g];
    for i in 0..n {
        let row = counts.row(i);
        let row = row.as_slice().expect("contiguous count row");
        for (slot, &y) in yf.iter_mut().zip(row) {
            *slot = f64::from(y);
        }
        let zrow = e.z_hat.row(i);
        let zrow = zrow.as_slice().expect("contiguous z row");
        for (j, &zj) in zrow.iter().enumerate() {
            if zj == 0.0 {
                continue;
            }
            let mut nrow = num.row_mut(j);
            let nrow = nrow.as_slice_mut().expect("contiguous num row");
            for (slot, &y) in nrow.iter_mut().zip(&yf) {
                *slot += zj * y;
            }
        }
        for (gene, u) in e.u_hat.cell_entries(i) {
            for j in 0..k {
                den[[j, gene]] -= zrow[j] * u[j];
            }
        }
    }
    let mut rate = num;
    for j in 0..k {
        for t in 0..g {
            let d = den[[j, t]];
            let r = if d > 0.0 { rate[[j, t]] / d } else { 0.0 };
            rate[[j, t]] = r.max(RATE_FLOOR);
        }
    }
    Ok(ClosedUpdates { pi, phi, rate })
}

/// pi and phi updates plus the per-cluster responsibility mass.
fn m_step_pi_phi(e: &EStepResult, data: &EmData) -> Result<(Array1<f64>, Array1<f64>, Vec<f64>)> {
    let n = e.z_hat.nrows();
    let k = e.z_hat.ncols();
    let g = data.n_genes();
    if e.u_hat.n_clusters() != k || e.u_hat.pattern().n_cells() != n {
        return Err(Error::Dimension("responsibility shapes disagree".into()));
    }
    let mut mass = vec![0.0; k];
    for row in e.z_hat.rows() {
        for (j, &z) in row.iter().enumerate() {
            mass[j] += z;
        }
    }
    for (j, &m) in mass.iter().enumerate() {
        if m < EMPTY_CLUSTER_TOL {
            return Err(Error::EmptyCluster {
                cluster: j,
                iteration: None,
            });
        }
    }
    let pi = Array1::from_iter(mass.iter().map(|&m| m / n as f64));
    let mut zero_mass = vec![0.0; k];
    for i in 0..n {
        for (_, u) in e.u_hat.cell_entries(i) {
            for j in 0..k {
                zero_mass[j] += e.z_hat[[i, j]] * u[j];
            }
        }
    }
    let phi = Array1::from_iter(
        zero_mass
            .iter()
            .zip(&mass)
            .map(|(&zm, &m)| (zm / (g as f64 * m)).clamp(0.0, PHI_CEIL)),
    );
    Ok((pi, phi, mass))
}

/// Hard cluster assignment: per-row argmax, ties to the lowest index.
pub fn assign_clusters(z_hat: &Array2<f64>) -> Vec<usize> {
    z_hat
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = j;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

/// Run EM (ZIP variants) or ECM (ZINB variants) from the given initial
/// parameters until the log-likelihood increase falls to `tol` or
/// `max_iter` is reached.
pub fn run_em(init: ModelParams, data: &EmData, opts: &EmOptions) -> Result<FitResult> {
    opts.validate()?;
    init.check_data(data)?;
    let pattern = Arc::new(ZeroPattern::build(data.counts.counts()));
    let mut params = init;
    let (mut e, mut ll_prev) = posterior(&params, data, pattern.clone())?;
    if !ll_prev.is_finite() {
        return Err(Error::Numerical(format!(
            "log-likelihood {ll_prev} at the initial parameters"
        )));
    }
    let mut trace = vec![ll_prev];
    let mut converged = false;
    let mut n_iter = 0;
    for t in 1..=opts.max_iter {
        params = match m_step(&params, &e, data, opts) {
            Ok(p) => p,
            Err(Error::EmptyCluster {
                cluster,
                iteration: None,
            }) => {
                return Err(Error::EmptyCluster {
                    cluster,
                    iteration: Some(t),
                })
            }
            Err(e) => return Err(e),
        };
        let (e_next, ll) = posterior(&params, data, pattern.clone())?;
        e = e_next;
        if !ll.is_finite() {
            return Err(Error::Numerical(format!(
                "log-likelihood {ll} at iteration {t}"
            )));
        }
        trace.push(ll);
        n_iter = t;
        let delta = ll - ll_prev;
        ll_prev = ll;
        if delta <= opts.tol {
            converged = true;
            break;
        }
    }
    let labels = assign_clusters(&e.z_hat);
    Ok(FitResult {
        params,
        loglik_trace: trace,
        n_iter,
        converged,
        z_hat: e.z_hat,
        labels,
    })
}

fn m_step(
    params: &ModelParams,
    e: &EStepResult,
    data: &EmData,
    opts: &EmOptions,
) -> Result<ModelParams> {
    match params {
        ModelParams::Zip(_) => {
            let up = m_step_closed(e, data)?;
            Ok(ModelParams::Zip(ZipParams {
                pi: up.pi,
                phi: up.phi,
                lambda: up.rate,
            }))
        }
        ModelParams::Zinb(old) => {
            let up = m_step_closed(e, data)?;
            let k = up.pi.len();
            let (n, g) = data.counts.counts().dim();
            let mut alpha = old.alpha.clone();
            if opts.update_dispersion {
                for j in 0..k {
                    let w = count_state_weights(e, j, n, g);
                    let row = up.rate.row(j);
                    let rates = row.broadcast((n, g)).expect("row broadcast over cells");
                    let counts = data.counts.counts().view();
                    let cand = solve_alpha(w.view(), counts, rates)?.alpha;
                    alpha[j] = pick_alpha(w.view(), counts, rates, alpha[j], cand);
                }
            }
            Ok(ModelParams::Zinb(ZinbParams {
                pi: up.pi,
                phi: up.phi,
                mu: up.rate,
                alpha,
            }))
        }
        ModelParams::ZipReg(old) => {
            let (pi, phi, _) = m_step_pi_phi(e, data)?;
            let (beta0, rho, beta) = fit_regression_coefs(old, None, e, data)?;
            Ok(ModelParams::ZipReg(RegParams {
                pi,
                phi,
                beta0,
                rho,
                beta,
                alpha: None,
            }))
        }
        ModelParams::ZinbReg(old) => {
            let (pi, phi, _) = m_step_pi_phi(e, data)?;
            let alpha_old = old
                .alpha
                .as_ref()
                .ok_or_else(|| Error::Domain("NB regression without alpha".into()))?;
            let alpha_slice: Vec<f64> = alpha_old.to_vec();
            let (beta0, rho, beta) = fit_regression_coefs(old, Some(&alpha_slice), e, data)?;
            let mut next = RegParams {
                pi,
                phi,
                beta0,
                rho,
                beta,
                alpha: Some(alpha_old.clone()),
            };
            if opts.update_dispersion {
                let (n, g) = data.counts.counts().dim();
                let k = next.pi.len();
                let mut alpha = alpha_old.clone();
                for j in 0..k {
                    let w = count_state_weights(e, j, n, g);
                    let rates = reg_rates_for_cluster(&next, data, j);
                    let counts = data.counts.counts().view();
                    let cand = solve_alpha(w.view(), counts, rates.view())?.alpha;
                    alpha[j] = pick_alpha(w.view(), counts, rates.view(), alpha[j], cand);
                }
                next.alpha = Some(alpha);
            }
            Ok(ModelParams::ZinbReg(next))
        }
    }
}

/// Keep a dispersion update only when it does not lower the conditional
/// objective; a bracketed score root can sit on a lower local maximum for
/// small or weakly informative slices.
fn pick_alpha(
    weights: ndarray::ArrayView2<f64>,
    counts: ndarray::ArrayView2<u32>,
    rates: ndarray::ArrayView2<f64>,
    current: f64,
    candidate: f64,
) -> f64 {
    if candidate == current {
        return current;
    }
    let q_now = alpha_objective(weights, counts, rates, current);
    let q_new = alpha_objective(weights, counts, rates, candidate);
    if q_new >= q_now {
        candidate
    } else {
        current
    }
}

/// z * (1 - u) for one cluster as a dense N x G matrix.
fn count_state_weights(e: &EStepResult, cluster: usize, n: usize, g: usize) -> Array2<f64> {
    let mut w = Array2::<f64>::zeros((n, g));
    for i in 0..n {
        let z = e.z_hat[[i, cluster]];
        w.row_mut(i).fill(z);
        for (gene, u) in e.u_hat.cell_entries(i) {
            w[[i, gene]] = z * (1.0 - u[cluster]).max(COUNT_STATE_FLOOR);
        }
    }
    w
}

/// Per-gene weighted GLM solves; returns (beta0, rho, beta).
fn fit_regression_coefs(
    old: &RegParams,
    alpha: Option<&[f64]>,
    e: &EStepResult,
    data: &EmData,
) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
    let counts = data.counts.counts();
    let (n, g) = counts.dim();
    let k = e.z_hat.ncols();
    let p = old.n_covariates();
    let offsets = data.log_offsets();
    let empty = Array2::<f64>::zeros((n, 0));
    let covariates = data
        .covariates
        .map(|x| x.values().view())
        .unwrap_or_else(|| empty.view());

    // Invert the zero pattern: per gene, the cells whose entry is zero and
    // the slot of their responsibility vector.
    let mut zero_cells: Vec<Vec<(usize, usize)>> = vec![Vec::new(); g];
    for i in 0..n {
        let range = e.u_hat.pattern().cell_range(i);
        for (slot, &gene) in range.clone().zip(e.u_hat.pattern().cell_genes(i)) {
            zero_cells[gene as usize].push((i, slot));
        }
    }
    let u_values = &e.u_hat;

    let fits: Vec<Result<GeneCoefficients>> = (0..g)
        .into_par_iter()
        .map(|gene| {
            let mut w = e.z_hat.clone();
            for &(i, slot) in &zero_cells[gene] {
                let base = slot * k;
                for j in 0..k {
                    let u = u_values.values[base + j];
                    w[[i, j]] *= (1.0 - u).max(COUNT_STATE_FLOOR);
                }
            }
            let y_col: Vec<u32> = counts.column(gene).to_vec();
            let y = ndarray::ArrayView1::from(&y_col);
            let init = GeneCoefficients {
                beta_k: (0..k).map(|j| old.free_coef(gene, j)).collect(),
                beta_p: old.beta.row(gene).to_vec(),
            };
            let prob = GeneRegressionProblem {
                y,
                weights: w.view(),
                offsets: offsets.view(),
                covariates,
                alpha,
            };
            match alpha {
                None => fit_gene_poisson(&prob, &init),
                Some(_) => fit_gene_nb(&prob, &init),
            }
        })
        .collect();

    let mut beta0 = Array1::zeros(g);
    let mut rho = Array2::zeros((g, k));
    let mut beta = Array2::zeros((g, p));
    for (gene, fit) in fits.into_iter().enumerate() {
        let coef = fit?;
        let (b0, r) = reparameterize(&coef.beta_k);
        beta0[gene] = b0;
        for j in 0..k {
            rho[[gene, j]] = r[j];
        }
        for q in 0..p {
            beta[[gene, q]] = coef.beta_p[q];
        }
    }
    Ok((beta0, rho, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CountMatrix;
    use crate::kernels::zip_log_pmf;
    use ndarray::array;

    fn zip_params(pi: Vec<f64>, phi: Vec<f64>, lambda: Array2<f64>) -> ModelParams {
        ModelParams::Zip(ZipParams {
            pi: Array1::from_vec(pi),
            phi: Array1::from_vec(phi),
            lambda,
        })
    }

    #[test]
    fn e_step_matches_bayes_on_the_toy_instance() {
        // N = 2, G = 1, K = 2, pi = (1/2, 1/2), phi = 0, lambda = (1, 4).
        let params = zip_params(vec![0.5, 0.5], vec![0.0, 0.0], array![[1.0], [4.0]]);
        let counts = CountMatrix::with_default_ids(array![[0u32], [4]]).unwrap();
        let data = EmData::new(&counts);
        let e = e_step(&params, &data).unwrap();
        let p0 = (-1.0f64).exp();
        let q0 = (-4.0f64).exp();
        assert!((e.z_hat[[0, 0]] - p0 / (p0 + q0)).abs() < 1e-12);
        let p4 = zip_log_pmf(4, 1.0, 0.0).unwrap().exp();
        let q4 = zip_log_pmf(4, 4.0, 0.0).unwrap().exp();
        assert!((e.z_hat[[1, 1]] - q4 / (p4 + q4)).abs() < 1e-12);
        for row in e.z_hat.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn e_step_brute_force_on_random_small_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let n = rng.random_range(1..=5);
            let g = rng.random_range(1..=3);
            let k = rng.random_range(1..=3);
            let counts = Array2::from_shape_fn((n, g), |_| rng.random_range(0..6u32));
            let m = CountMatrix::with_default_ids(counts.clone()).unwrap();
            let mut pi: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
            let s: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|p| *p /= s);
            let phi: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..0.6)).collect();
            let lambda = Array2::from_shape_fn((k, g), |_| rng.random_range(0.2..8.0));
            let params = zip_params(pi.clone(), phi.clone(), lambda.clone());
            let data = EmData::new(&m);
            let e = e_step(&params, &data).unwrap();
            for i in 0..n {
                // Direct product-then-normalize posterior.
                let dens: Vec<f64> = (0..k)
                    .map(|j| {
                        let mut prod = pi[j];
                        for t in 0..g {
                            prod *= zip_log_pmf(counts[[i, t]], lambda[[j, t]], phi[j])
                                .unwrap()
                                .exp();
                        }
                        prod
                    })
                    .collect();
                let total: f64 = dens.iter().sum();
                for j in 0..k {
                    assert!(
                        (e.z_hat[[i, j]] - dens[j] / total).abs() < 1e-10,
                        "cell {i} cluster {j}"
                    );
                }
                // u oracle at zero entries, absent elsewhere.
                for t in 0..g {
                    match e.u_hat.get(i, t) {
                        Some(u) => {
                            assert_eq!(counts[[i, t]], 0);
                            for j in 0..k {
                                let p0 = (-lambda[[j, t]]).exp();
                                let expect = phi[j] / (phi[j] + (1.0 - phi[j]) * p0);
                                assert!((u[j] - expect).abs() < 1e-12);
                            }
                        }
                        None => assert_ne!(counts[[i, t]], 0),
                    }
                }
            }
        }
    }

    #[test]
    fn e_step_single_cluster_is_all_ones() {
        let params = zip_params(vec![1.0], vec![0.1], array![[2.0, 3.0]]);
        let counts = CountMatrix::with_default_ids(array![[1u32, 0], [4, 2]]).unwrap();
        let e = e_step(&params, &EmData::new(&counts)).unwrap();
        assert!(e.z_hat.iter().all(|&z| (z - 1.0).abs() < 1e-15));
    }

    fn golden_max(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
        let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - inv_phi * (hi - lo);
            let b = lo + inv_phi * (hi - lo);
            if f(a) < f(b) {
                lo = a;
            } else {
                hi = b;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn m_step_matches_numeric_q_maximization() {
        let params = zip_params(
            vec![0.4, 0.6],
            vec![0.2, 0.1],
            array![[1.0, 5.0], [4.0, 0.5]],
        );
        let counts =
            CountMatrix::with_default_ids(array![[0u32, 6], [2, 0], [0, 0], [5, 1]]).unwrap();
        let data = EmData::new(&counts);
        let e = e_step(&params, &data).unwrap();
        let up = m_step_closed(&e, &data).unwrap();
        let (n, g, k) = (4, 2, 2);

        // Q1 over the K = 2 simplex.
        let s: Vec<f64> = (0..k).map(|j| e.z_hat.column(j).sum()).collect();
        let pi1 = golden_max(1e-9, 1.0 - 1e-9, |p| s[0] * p.ln() + s[1] * (1.0 - p).ln());
        assert!((up.pi[0] - pi1).abs() < 1e-6);

        // Q2 separately per cluster.
        for j in 0..k {
            let mut a = 0.0; // sum z u
            let mut b = 0.0; // sum z (1 - u)
            for i in 0..n {
                for t in 0..g {
                    let u = e.u_hat.get(i, t).map_or(0.0, |u| u[j]);
                    a += e.z_hat[[i, j]] * u;
                    b += e.z_hat[[i, j]] * (1.0 - u);
                }
            }
            let phi = golden_max(1e-12, 1.0 - 1e-12, |p| a * p.ln() + b * (1.0 - p).ln());
            assert!((up.phi[j] - phi).abs() < 1e-6, "cluster {j}");
        }

        // Q3 separately per (gene, cluster).
        for j in 0..k {
            for t in 0..g {
                let mut wsum = 0.0;
                let mut wy = 0.0;
                for i in 0..n {
                    let u = e.u_hat.get(i, t).map_or(0.0, |u| u[j]);
                    let w = e.z_hat[[i, j]] * (1.0 - u);
                    wsum += w;
                    wy += w * f64::from(counts.counts()[[i, t]]);
                }
                let lam = golden_max(1e-6, 20.0, |l| -wsum * l + wy * l.ln());
                assert!(
                    (up.rate[[j, t]] - lam).abs() < 1e-6,
                    "gene {t} cluster {j}: {} vs {lam}",
                    up.rate[[j, t]]
                );
            }
        }
    }

    #[test]
    fn m_step_uniform_responsibilities_give_uniform_pi() {
        let params = zip_params(vec![0.5, 0.5], vec![0.0, 0.0], array![[1.0], [1.0]]);
        let counts = CountMatrix::with_default_ids(array![[2u32], [3], [4], [1]]).unwrap();
        let data = EmData::new(&counts);
        // Identical clusters make every responsibility exactly 1/K.
        let e = e_step(&params, &data).unwrap();
        let up = m_step_closed(&e, &data).unwrap();
        assert!((up.pi[0] - 0.5).abs() < 1e-12);
        assert!((up.pi[1] - 0.5).abs() < 1e-12);
        // No zeros: rate is the z-weighted column mean.
        assert!((up.rate[[0, 0]] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn assign_clusters_breaks_ties_low() {
        let z = array![[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]];
        assert_eq!(assign_clusters(&z), vec![1, 0, 0]);
    }

    #[test]
    fn assign_clusters_matches_argmax_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        let z = Array2::from_shape_fn((100, 3), |_| rng.random_range(0.0..1.0));
        let labels = assign_clusters(&z);
        for (i, &l) in labels.iter().enumerate() {
            let row = z.row(i);
            for j in 0..3 {
                assert!(row[l] >= row[j]);
            }
        }
    }

    #[test]
    fn k1_no_zero_data_converges_in_two_iterations() {
        let counts =
            CountMatrix::with_default_ids(array![[3u32, 1], [2, 4], [5, 2], [1, 3]]).unwrap();
        let data = EmData::new(&counts);
        let init = zip_params(vec![1.0], vec![0.0], array![[1.0, 1.0]]);
        let fit = run_em(init, &data, &EmOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.n_iter <= 2, "took {} iterations", fit.n_iter);
        // Closed-form single-cluster MLE: gene means; phi stays 0.
        match &fit.params {
            ModelParams::Zip(p) => {
                assert!((p.lambda[[0, 0]] - 2.75).abs() < 1e-12);
                assert!((p.lambda[[0, 1]] - 2.5).abs() < 1e-12);
                assert_eq!(p.phi[0], 0.0);
            }
            _ => panic!("variant changed"),
        }
    }

    #[test]
    fn phi_stays_zero_without_zeros() {
        let counts =
            CountMatrix::with_default_ids(array![[3u32, 1], [2, 4], [5, 2], [1, 3]]).unwrap();
        let data = EmData::new(&counts);
        let init = zip_params(
            vec![0.5, 0.5],
            vec![0.0, 0.0],
            array![[1.0, 1.0], [4.0, 4.0]],
        );
        let fit = run_em(init, &data, &EmOptions::default()).unwrap();
        match &fit.params {
            ModelParams::Zip(p) => assert!(p.phi.iter().all(|&v| v == 0.0)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn em_trace_is_non_decreasing_on_zip_toy() {
        let counts = CountMatrix::with_default_ids(array![
            [0u32, 6, 1],
            [2, 0, 4],
            [0, 0, 1],
            [5, 1, 0],
            [7, 2, 3],
            [0, 4, 0]
        ])
        .unwrap();
        let data = EmData::new(&counts);
        let init = zip_params(
            vec![0.5, 0.5],
            vec![0.1, 0.2],
            array![[1.0, 2.0, 1.0], [5.0, 1.0, 3.0]],
        );
        let fit = run_em(init, &data, &EmOptions::default()).unwrap();
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "trace decreased: {} -> {}", w[0], w[1]);
        }
        assert_eq!(fit.labels, assign_clusters(&fit.z_hat));
    }

    #[test]
    fn label_permutation_equivariance() {
        let counts = CountMatrix::with_default_ids(array![
            [0u32, 6, 1],
            [2, 0, 4],
            [0, 0, 1],
            [5, 1, 0],
            [7, 2, 3],
            [0, 4, 0]
        ])
        .unwrap();
        let data = EmData::new(&counts);
        let init = zip_params(
            vec![0.4, 0.6],
            vec![0.1, 0.2],
            array![[1.0, 2.0, 1.0], [5.0, 1.0, 3.0]],
        );
        let perm = [1usize, 0];
        let fit_a = run_em(init.clone(), &data, &EmOptions::default()).unwrap();
        let fit_b = run_em(init.permute_clusters(&perm), &data, &EmOptions::default()).unwrap();
        for (a, b) in fit_a.loglik_trace.iter().zip(&fit_b.loglik_trace) {
            assert!((a - b).abs() < 1e-10);
        }
        let expect = fit_a.params.permute_clusters(&perm);
        match (&fit_b.params, &expect) {
            (ModelParams::Zip(x), ModelParams::Zip(y)) => {
                assert!(x
                    .lambda
                    .iter()
                    .zip(y.lambda.iter())
                    .all(|(a, b)| (a - b).abs() < 1e-12));
            }
            _ => unreachable!(),
        }
        for (a, b) in fit_a.labels.iter().zip(&fit_b.labels) {
            assert_eq!(perm[*b], *a);
        }
    }

    #[test]
    fn fixed_point_self_consistency() {
        // Well-separated clusters, so the EM map contracts hard and the
        // converged point sits at a genuine fixed point.
        let counts = CountMatrix::with_default_ids(array![
            [0u32, 1, 0],
            [1, 0, 2],
            [0, 2, 1],
            [12, 9, 14],
            [9, 11, 13],
            [15, 8, 10]
        ])
        .unwrap();
        let data = EmData::new(&counts);
        let init = zip_params(
            vec![0.5, 0.5],
            vec![0.05, 0.05],
            array![[1.0, 1.0, 1.0], [10.0, 10.0, 10.0]],
        );
        let opts = EmOptions {
            tol: 1e-10,
            ..Default::default()
        };
        let fit = run_em(init, &data, &opts).unwrap();
        let e = e_step(&fit.params, &data).unwrap();
        let up = m_step_closed(&e, &data).unwrap();
        match &fit.params {
            ModelParams::Zip(p) => {
                for (a, b) in p.pi.iter().zip(up.pi.iter()) {
                    assert!((a - b).abs() < 1e-9);
                }
                for (a, b) in p.phi.iter().zip(up.phi.iter()) {
                    assert!((a - b).abs() < 1e-9);
                }
                for (a, b) in p.lambda.iter().zip(up.rate.iter()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn zip_reg_with_unit_size_factors_matches_plain_zip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let counts = Array2::from_shape_fn((40, 4), |(_, t)| {
            let lam = [2.0, 5.0, 1.0, 3.0][t];
            // Crude Poisson-ish integer draws are enough here.
            (0..20)
                .filter(|_| rng.random_range(0.0..1.0) < lam / 20.0)
                .count() as u32
        });
        let m = CountMatrix::with_default_ids(counts).unwrap();
        let data = EmData::new(&m);
        let lambda0 = array![[1.0, 2.0, 1.5, 2.5], [4.0, 6.0, 0.5, 2.0]];
        let zip_init = zip_params(vec![0.5, 0.5], vec![0.05, 0.05], lambda0.clone());
        // Matching regression init: free coefficients log lambda0.
        let mut beta0 = Array1::zeros(4);
        let mut rho = Array2::zeros((4, 2));
        for t in 0..4 {
            let free: Vec<f64> = (0..2).map(|j| lambda0[[j, t]].ln()).collect();
            let (b0, r) = reparameterize(&free);
            beta0[t] = b0;
            rho[[t, 0]] = r[0];
            rho[[t, 1]] = r[1];
        }
        let reg_init = ModelParams::ZipReg(RegParams {
            pi: array![0.5, 0.5],
            phi: array![0.05, 0.05],
            beta0,
            rho,
            beta: Array2::zeros((4, 0)),
            alpha: None,
        });
        let opts = EmOptions {
            tol: 1e-9,
            ..Default::default()
        };
        let zip_fit = run_em(zip_init, &data, &opts).unwrap();
        let reg_fit = run_em(reg_init, &data, &opts).unwrap();
        let (lam, reg) = match (&zip_fit.params, &reg_fit.params) {
            (ModelParams::Zip(a), ModelParams::ZipReg(b)) => (&a.lambda, b),
            _ => unreachable!(),
        };
        for t in 0..4 {
            for j in 0..2 {
                let fitted = reg.free_coef(t, j).exp();
                assert!(
                    (fitted - lam[[j, t]]).abs() < 1e-4,
                    "gene {t} cluster {j}: {fitted} vs {}",
                    lam[[j, t]]
                );
            }
        }
        assert!(
            (zip_fit.loglik() - reg_fit.loglik()).abs() < 1e-4,
            "{} vs {}",
            zip_fit.loglik(),
            reg_fit.loglik()
        );
    }
}
