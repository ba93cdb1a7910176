//! Weighted per-gene regression solvers for the covariate M-steps, the
//! identifiability reparameterization, and the dispersion score solver.
//!
//! Each gene is an independent problem: K free cluster intercepts plus P
//! shared covariate slopes, maximizing the responsibility-weighted Poisson
//! or negative binomial log-likelihood with a log offset. Fisher scoring
//! with step halving is used for the coefficients; the dispersion solves a
//! one-dimensional score equation by safeguarded Newton in log space.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::special::digamma_diff;

/// Convergence threshold on the gradient max-norm of a coefficient solve.
const GRAD_TOL: f64 = 1e-8;
/// Inner iteration cap of a coefficient solve.
const MAX_SCORING_ITER: usize = 50;
/// Maximum number of step halvings before giving up on an iteration.
const MAX_HALVINGS: usize = 30;
/// Relative slack when accepting a step; absorbs float noise at stationarity.
const ACCEPT_SLACK: f64 = 1e-12;
/// Bracket for the dispersion solve.
const ALPHA_LO: f64 = 1e-8;
const ALPHA_HI: f64 = 1e4;
/// Absolute tolerance on the dispersion score at the returned root.
const SCORE_TOL: f64 = 1e-6;

/// The weighted data of one gene's M-step subproblem.
///
/// `weights[[n, k]]` is the product of the cluster responsibility and the
/// count-state probability of cell n under cluster k; `offsets` holds log
/// size factors. `alpha` carries the per-cluster dispersions, fixed during a
/// coefficient solve, for the NB family only.
#[derive(Debug, Clone)]
pub struct GeneRegressionProblem<'a> {
    pub y: ArrayView1<'a, u32>,
    pub weights: ArrayView2<'a, f64>,
    pub offsets: ArrayView1<'a, f64>,
    pub covariates: ArrayView2<'a, f64>,
    pub alpha: Option<&'a [f64]>,
}

impl<'a> GeneRegressionProblem<'a> {
    pub fn n_cells(&self) -> usize {
        self.y.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_cells();
        if self.weights.nrows() != n || self.offsets.len() != n || self.covariates.nrows() != n {
            return Err(Error::Dimension(format!(
                "inconsistent problem sizes: y {n}, weights {:?}, offsets {}, covariates {:?}",
                self.weights.dim(),
                self.offsets.len(),
                self.covariates.dim()
            )));
        }
        if self
            .weights
            .iter()
            .any(|&w| !w.is_finite() || !(0.0..=1.0).contains(&w))
        {
            return Err(Error::Domain("weights must be finite in [0, 1]".into()));
        }
        if self.offsets.iter().any(|o| !o.is_finite()) {
            return Err(Error::Domain("offsets must be finite".into()));
        }
        if let Some(a) = self.alpha {
            if a.len() != self.n_clusters() {
                return Err(Error::Dimension("alpha length != K".into()));
            }
            if a.iter().any(|&v| !v.is_finite() || v <= 0.0) {
                return Err(Error::Domain("alpha entries must be > 0".into()));
            }
        }
        for k in 0..self.n_clusters() {
            if self.weights.column(k).sum() <= 0.0 {
                return Err(Error::Domain(format!(
                    "cluster {k} has zero total weight in the gene subproblem"
                )));
            }
        }
        Ok(())
    }
}

/// Free coefficients of one gene: K per-cluster intercepts and P shared
/// covariate slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneCoefficients {
    pub beta_k: Vec<f64>,
    pub beta_p: Vec<f64>,
}

impl GeneCoefficients {
    pub fn zeros(k: usize, p: usize) -> Self {
        Self {
            beta_k: vec![0.0; k],
            beta_p: vec![0.0; p],
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut v = self.beta_k.clone();
        v.extend_from_slice(&self.beta_p);
        v
    }

    fn from_flat(flat: &[f64], k: usize) -> Self {
        Self {
            beta_k: flat[..k].to_vec(),
            beta_p: flat[k..].to_vec(),
        }
    }
}

/// Weighted log-likelihood (up to coefficient-independent constants) and its
/// gradient for a gene subproblem; the family is NB when the problem carries
/// dispersions, Poisson otherwise.
pub fn objective_and_grad(
    prob: &GeneRegressionProblem,
    coef: &GeneCoefficients,
) -> (f64, Vec<f64>) {
    let (n, k, p) = (prob.n_cells(), prob.n_clusters(), prob.n_covariates());
    let dim = k + p;
    let mut f = 0.0;
    let mut grad = vec![0.0; dim];
    for i in 0..n {
        let yf = f64::from(prob.y[i]);
        let mut xb = 0.0;
        for q in 0..p {
            xb += prob.covariates[[i, q]] * coef.beta_p[q];
        }
        for j in 0..k {
            let w = prob.weights[[i, j]];
            if w == 0.0 {
                continue;
            }
            let eta = prob.offsets[i] + coef.beta_k[j] + xb;
            let mu = eta.exp();
            let resid = match prob.alpha {
                None => {
                    f += w * (yf * eta - mu);
                    yf - mu
                }
                Some(a) => {
                    let am = a[j] * mu;
                    let l1p = am.ln_1p();
                    let nu = 1.0 / a[j];
                    f += w * (yf * (am.ln() - l1p) - nu * l1p);
                    (yf - mu) / (1.0 + am)
                }
            };
            grad[j] += w * resid;
            for q in 0..p {
                grad[k + q] += w * resid * prob.covariates[[i, q]];
            }
        }
    }
    (f, grad)
}

/// Expected information matrix at the current coefficients.
fn scoring_matrix(prob: &GeneRegressionProblem, coef: &GeneCoefficients) -> Array2<f64> {
    let (n, k, p) = (prob.n_cells(), prob.n_clusters(), prob.n_covariates());
    let dim = k + p;
    let mut info = Array2::<f64>::zeros((dim, dim));
    for i in 0..n {
        let mut xb = 0.0;
        for q in 0..p {
            xb += prob.covariates[[i, q]] * coef.beta_p[q];
        }
        for j in 0..k {
            let w = prob.weights[[i, j]];
            if w == 0.0 {
                continue;
            }
            let mu = (prob.offsets[i] + coef.beta_k[j] + xb).exp();
            // Working weight: mu for Poisson, mu/(1 + alpha mu) for NB.
            let m = match prob.alpha {
                None => w * mu,
                Some(a) => w * mu / (1.0 + a[j] * mu),
            };
            info[[j, j]] += m;
            for q in 0..p {
                info[[j, k + q]] += m * prob.covariates[[i, q]];
                info[[k + q, j]] = info[[j, k + q]];
                for r in q..p {
                    let v = m * prob.covariates[[i, q]] * prob.covariates[[i, r]];
                    info[[k + q, k + r]] += v;
                    if r != q {
                        info[[k + r, k + q]] = info[[k + q, k + r]];
                    }
                }
            }
        }
    }
    info
}

/// Solve a symmetric positive definite system in place; `None` when a pivot
/// is not strictly positive.
fn cholesky_solve(mut a: Array2<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for j in 0..n {
        let mut d = a[[j, j]];
        for t in 0..j {
            d -= a[[j, t]] * a[[j, t]];
        }
        if !d.is_finite() || d <= 0.0 {
            return None;
        }
        let root = d.sqrt();
        a[[j, j]] = root;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for t in 0..j {
                v -= a[[i, t]] * a[[j, t]];
            }
            a[[i, j]] = v / root;
        }
    }
    // Forward then backward substitution on the lower factor.
    let mut x = b.to_vec();
    for i in 0..n {
        for t in 0..i {
            x[i] -= a[[i, t]] * x[t];
        }
        x[i] /= a[[i, i]];
    }
    for i in (0..n).rev() {
        for t in (i + 1)..n {
            x[i] -= a[[t, i]] * x[t];
        }
        x[i] /= a[[i, i]];
    }
    Some(x)
}

fn fit_gene(prob: &GeneRegressionProblem, init: &GeneCoefficients) -> Result<GeneCoefficients> {
    prob.validate()?;
    let k = prob.n_clusters();
    let dim = k + prob.n_covariates();
    if init.beta_k.len() != k || init.beta_p.len() != prob.n_covariates() {
        return Err(Error::Dimension("init coefficient shape mismatch".into()));
    }
    let mut flat = init.to_flat();
    let mut coef = GeneCoefficients::from_flat(&flat, k);
    let (mut f, mut grad) = objective_and_grad(prob, &coef);
    if !f.is_finite() {
        return Err(Error::Numerical(
            "objective not finite at the initial coefficients".into(),
        ));
    }
    for _ in 0..MAX_SCORING_ITER {
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax <= GRAD_TOL {
            break;
        }
        let info = scoring_matrix(prob, &coef);
        let step = match cholesky_solve(info.clone(), &grad) {
            Some(s) => s,
            None => {
                // One ridge retry; benign collinearity at extreme weights.
                let mut jittered = info;
                for d in 0..dim {
                    jittered[[d, d]] += 1e-10;
                }
                cholesky_solve(jittered, &grad).ok_or_else(|| {
                    Error::SingularSystem(format!(
                        "scoring matrix not positive definite (dim {dim})"
                    ))
                })?
            }
        };
        let step_norm = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let coef_norm = flat.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        if step_norm <= 1e-14 * (1.0 + coef_norm) {
            break;
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = flat.iter().zip(&step).map(|(c, s)| c + scale * s).collect();
            let cand_coef = GeneCoefficients::from_flat(&cand, k);
            let (f2, g2) = objective_and_grad(prob, &cand_coef);
            if f2.is_finite() && f2 >= f - ACCEPT_SLACK * (1.0 + f.abs()) {
                flat = cand;
                coef = cand_coef;
                f = f2;
                grad = g2;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::NoProgress(format!(
                "step halving exhausted at objective {f}"
            )));
        }
    }
    Ok(coef)
}

/// Maximize the gene's weighted Poisson log-likelihood.
pub fn fit_gene_poisson(
    prob: &GeneRegressionProblem,
    init: &GeneCoefficients,
) -> Result<GeneCoefficients> {
    if prob.alpha.is_some() {
        return Err(Error::Domain(
            "Poisson fit received a problem with dispersions".into(),
        ));
    }
    fit_gene(prob, init)
}

/// Maximize the gene's weighted NB log-likelihood with dispersions held
/// fixed.
pub fn fit_gene_nb(
    prob: &GeneRegressionProblem,
    init: &GeneCoefficients,
) -> Result<GeneCoefficients> {
    if prob.alpha.is_none() {
        return Err(Error::Domain("NB fit requires fixed dispersions".into()));
    }
    fit_gene(prob, init)
}

/// Split free per-cluster intercepts into a gene baseline and zero-sum
/// cluster effects: beta0 = mean_k beta_k, rho_k = beta_k - beta0.
pub fn reparameterize(beta_gk: &[f64]) -> (f64, Vec<f64>) {
    assert!(!beta_gk.is_empty(), "reparameterize needs K >= 1");
    let k = beta_gk.len() as f64;
    let beta0 = beta_gk.iter().sum::<f64>() / k;
    let rho = beta_gk.iter().map(|b| b - beta0).collect();
    (beta0, rho)
}

/// Which end of the bracket a dispersion solve was pinned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaBound {
    /// Score negative on the whole bracket: no overdispersion signal, the
    /// data is consistent with Poisson.
    Lower,
    /// Score positive on the whole bracket: overdispersion beyond the range.
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaEstimate {
    pub alpha: f64,
    pub bound: Option<AlphaBound>,
}

/// Weighted dispersion score, the derivative in alpha of the weighted NB
/// log-likelihood with the means held fixed, together with its derivative.
///
/// Per entry the bracket is
///   log(1 + a mu) + a (y - mu)/(1 + a mu) + psi(1/a) - psi(y + 1/a)
/// scaled by 1/a^2; the digamma difference is evaluated as an exact finite
/// sum over integer counts.
pub fn alpha_score(
    weights: ArrayView2<f64>,
    counts: ArrayView2<u32>,
    rates: ArrayView2<f64>,
    alpha: f64,
) -> (f64, f64) {
    let nu = 1.0 / alpha;
    let ymax = counts
        .iter()
        .zip(weights.iter())
        .filter(|&(_, &w)| w > 0.0)
        .map(|(&y, _)| y)
        .max()
        .unwrap_or(0) as usize;
    // cum1[y] = sum_{j<y} 1/(nu+j) = psi(y+nu) - psi(nu); cum2 the squares.
    let mut cum1 = vec![0.0; ymax + 1];
    let mut cum2 = vec![0.0; ymax + 1];
    for y in 1..=ymax {
        let d = nu + (y - 1) as f64;
        cum1[y] = cum1[y - 1] + 1.0 / d;
        cum2[y] = cum2[y - 1] + 1.0 / (d * d);
    }
    let mut b_sum = 0.0;
    let mut db_sum = 0.0;
    for ((&w, &y), &mu) in weights.iter().zip(counts.iter()).zip(rates.iter()) {
        if w == 0.0 {
            continue;
        }
        let yf = f64::from(y);
        let am = alpha * mu;
        let denom = 1.0 + am;
        let b = denom.ln() + alpha * (yf - mu) / denom - cum1[y as usize];
        let db = mu / denom + (yf - mu) / (denom * denom) - cum2[y as usize] / (alpha * alpha);
        b_sum += w * b;
        db_sum += w * db;
    }
    let inv2 = 1.0 / (alpha * alpha);
    let score = inv2 * b_sum;
    let dscore = inv2 * (db_sum - 2.0 * b_sum / alpha);
    (score, dscore)
}

/// Solve the dispersion score equation for one cluster.
///
/// The root is found by safeguarded Newton in log alpha with bisection
/// fallback on the bracket [1e-8, 1e4]; without a sign change the matching
/// boundary is returned and flagged.
pub fn solve_alpha(
    weights: ArrayView2<f64>,
    counts: ArrayView2<u32>,
    rates: ArrayView2<f64>,
) -> Result<AlphaEstimate> {
    if weights.dim() != counts.dim() || weights.dim() != rates.dim() {
        return Err(Error::Dimension(format!(
            "weights {:?}, counts {:?}, rates {:?} must agree",
            weights.dim(),
            counts.dim(),
            rates.dim()
        )));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(Error::Domain(
            "dispersion solve needs positive weight".into(),
        ));
    }
    if rates
        .iter()
        .zip(weights.iter())
        .any(|(&m, &w)| w > 0.0 && (!m.is_finite() || m <= 0.0))
    {
        return Err(Error::Domain("rates must be positive and finite".into()));
    }

    let (s_lo, _) = alpha_score(weights, counts, rates, ALPHA_LO);
    if s_lo <= 0.0 {
        return Ok(AlphaEstimate {
            alpha: ALPHA_LO,
            bound: Some(AlphaBound::Lower),
        });
    }
    if s_lo.abs() <= SCORE_TOL {
        return Ok(AlphaEstimate {
            alpha: ALPHA_LO,
            bound: None,
        });
    }
    let (s_hi, _) = alpha_score(weights, counts, rates, ALPHA_HI);
    if s_hi >= 0.0 {
        return Ok(AlphaEstimate {
            alpha: ALPHA_HI,
            bound: Some(AlphaBound::Upper),
        });
    }

    // Bracket with score positive at `a` and negative at `b`. Near the
    // lower end the 1/alpha^2 prefactor blows the score up, so an absolute
    // tolerance can be unreachable in doubles even at the root; once the
    // bracket has collapsed to machine width the midpoint is the root.
    let (mut a, mut b) = (ALPHA_LO, ALPHA_HI);
    let mut alpha = (a.ln() + b.ln()).mul_add(0.5, 0.0).exp();
    for iter in 0..200 {
        let (s, ds) = alpha_score(weights, counts, rates, alpha);
        if s.abs() <= SCORE_TOL {
            return Ok(AlphaEstimate { alpha, bound: None });
        }
        if s > 0.0 {
            a = alpha;
        } else {
            b = alpha;
        }
        if b.ln() - a.ln() <= 1e-13 {
            return Ok(AlphaEstimate { alpha, bound: None });
        }
        // Newton in t = ln alpha (dS/dt = alpha * dS/dalpha), with a forced
        // bisection every third step so the bracket always collapses.
        let t = alpha.ln();
        let dt = -s / (ds * alpha);
        let t_new = t + dt;
        alpha = if iter % 3 != 2 && dt.is_finite() && t_new > a.ln() && t_new < b.ln() {
            t_new.exp()
        } else {
            ((a.ln() + b.ln()) * 0.5).exp()
        };
    }
    Err(Error::Numerical(
        "dispersion score did not reach tolerance in 200 iterations".into(),
    ))
}

/// psi(y + nu) - psi(nu) used by the score; exposed for cross-checks.
pub fn nb_digamma_increment(y: u32, nu: f64) -> f64 {
    digamma_diff(y, nu)
}

/// The alpha-dependent part of the weighted NB log-likelihood with means
/// held fixed; the dispersion update accepts a score root only when this
/// does not decrease, which keeps the ECM ascent intact even when the score
/// has several sign changes.
pub fn alpha_objective(
    weights: ArrayView2<f64>,
    counts: ArrayView2<u32>,
    rates: ArrayView2<f64>,
    alpha: f64,
) -> f64 {
    let nu = 1.0 / alpha;
    let ymax = counts
        .iter()
        .zip(weights.iter())
        .filter(|&(_, &w)| w > 0.0)
        .map(|(&y, _)| y)
        .max()
        .unwrap_or(0) as usize;
    // lnn[y] = ln Gamma(y + nu) - ln Gamma(nu), as an exact finite sum.
    let mut lnn = vec![0.0; ymax + 1];
    for y in 1..=ymax {
        lnn[y] = lnn[y - 1] + (nu + (y - 1) as f64).ln();
    }
    let mut acc = 0.0;
    for ((&w, &y), &mu) in weights.iter().zip(counts.iter()).zip(rates.iter()) {
        if w == 0.0 {
            continue;
        }
        let am = alpha * mu;
        let l1p = am.ln_1p();
        let yf = f64::from(y);
        acc += w * (lnn[y as usize] + yf * (am.ln() - l1p) - nu * l1p);
    }
    acc
}
