//! Numerically stable log densities for the ZIP and ZINB components and the
//! observed-data mixture log-likelihood.
//!
//! Everything runs in log space: per-cell densities are sums over genes of
//! log pmfs (gene index ascending), and mixing over clusters uses
//! log-sum-exp. The zero branch log(phi + (1-phi) p0) is evaluated as
//! log-add-exp(log phi, log1p(-phi) + log p0) so it stays finite for large
//! rates.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::data::EmData;
use crate::error::{Error, Result};
use crate::params::{ModelParams, RegParams, ZinbParams, ZipParams};
use crate::special::{ln_factorial_table, ln_gamma, log_add_exp, log_sum_exp};

/// Locations of the zero counts of a matrix, in CSR-like layout over cells.
///
/// Zero-state responsibilities are only defined (and stored) at these
/// entries; everywhere else they are identically zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZeroPattern {
    offsets: Vec<usize>,
    genes: Vec<u32>,
}

impl ZeroPattern {
    pub fn build(counts: &Array2<u32>) -> Self {
        let (n, _) = counts.dim();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut genes = Vec::new();
        offsets.push(0);
        for row in counts.rows() {
            for (g, &y) in row.iter().enumerate() {
                if y == 0 {
                    genes.push(g as u32);
                }
            }
            offsets.push(genes.len());
        }
        Self { offsets, genes }
    }

    /// Total number of zero entries.
    pub fn nnz(&self) -> usize {
        self.genes.len()
    }

    pub fn n_cells(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Zero-gene indices of one cell, ascending.
    pub fn cell_genes(&self, cell: usize) -> &[u32] {
        &self.genes[self.offsets[cell]..self.offsets[cell + 1]]
    }

    pub(crate) fn cell_range(&self, cell: usize) -> std::ops::Range<usize> {
        self.offsets[cell]..self.offsets[cell + 1]
    }
}

/// Log pmf of the zero-inflated Poisson distribution.
pub fn zip_log_pmf(y: u32, lambda: f64, phi: f64) -> Result<f64> {
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(Error::Domain(format!("lambda must be > 0, got {lambda}")));
    }
    check_phi(phi)?;
    Ok(zip_log_pmf_unchecked(y, lambda, phi))
}

#[inline]
fn zip_log_pmf_unchecked(y: u32, lambda: f64, phi: f64) -> f64 {
    let ln1m = (-phi).ln_1p();
    if y == 0 {
        log_add_exp(phi.ln(), ln1m - lambda)
    } else {
        ln1m - lambda + f64::from(y) * lambda.ln() - ln_gamma(f64::from(y) + 1.0)
    }
}

/// Log pmf of the zero-inflated negative binomial distribution with mean
/// `mu`, dispersion `alpha` (size 1/alpha), and always-zero probability
/// `phi`. The zero branch carries the full mixture mass
/// phi + (1-phi)(1+alpha*mu)^(-1/alpha).
pub fn zinb_log_pmf(y: u32, mu: f64, alpha: f64, phi: f64) -> Result<f64> {
    if !mu.is_finite() || mu <= 0.0 {
        return Err(Error::Domain(format!("mu must be > 0, got {mu}")));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Domain(format!("alpha must be > 0, got {alpha}")));
    }
    check_phi(phi)?;
    Ok(zinb_log_pmf_unchecked(y, mu, alpha, phi))
}

#[inline]
fn zinb_log_pmf_unchecked(y: u32, mu: f64, alpha: f64, phi: f64) -> f64 {
    let nu = 1.0 / alpha;
    let l1p = (alpha * mu).ln_1p();
    let ln1m = (-phi).ln_1p();
    if y == 0 {
        log_add_exp(phi.ln(), ln1m - nu * l1p)
    } else {
        let yf = f64::from(y);
        ln1m - nu * l1p + yf * ((alpha * mu).ln() - l1p) + ln_gamma(yf + nu)
            - ln_gamma(nu)
            - ln_gamma(yf + 1.0)
    }
}

fn check_phi(phi: f64) -> Result<()> {
    if !phi.is_finite() || !(0.0..=1.0).contains(&phi) {
        return Err(Error::Domain(format!("phi must lie in [0, 1], got {phi}")));
    }
    Ok(())
}

/// Rate exp(log t + beta0 + rho + x . beta) of the log-linked models; the
/// size-factor-only reduced model is the P = 0 case.
pub fn linpred_rate(
    t_n: f64,
    beta0g: f64,
    rho_gk: f64,
    x_row: &[f64],
    beta_g: &[f64],
) -> Result<f64> {
    if !t_n.is_finite() || t_n <= 0.0 {
        return Err(Error::Domain(format!("size factor must be > 0, got {t_n}")));
    }
    if x_row.len() != beta_g.len() {
        return Err(Error::Dimension(format!(
            "{} covariates for {} coefficients",
            x_row.len(),
            beta_g.len()
        )));
    }
    let mut eta = t_n.ln() + beta0g + rho_gk;
    for (x, b) in x_row.iter().zip(beta_g) {
        eta += x * b;
    }
    if eta >= f64::MAX.ln() {
        return Err(Error::Overflow(format!(
            "linear predictor {eta} exceeds the representable exponent range"
        )));
    }
    Ok(eta.exp())
}

/// Observed-data log-likelihood of a mixture given a data bundle.
pub fn mixture_loglik(params: &ModelParams, data: &EmData) -> Result<f64> {
    params.check_data(data)?;
    let eval = evaluate(params, data, None)?;
    let ln_pi: Vec<f64> = params.pi().iter().map(|&p| p.ln()).collect();
    let k = ln_pi.len();
    let mut scratch = vec![0.0; k];
    let mut total = 0.0;
    for row in eval.log_dens.rows() {
        for (j, v) in row.iter().enumerate() {
            scratch[j] = ln_pi[j] + v;
        }
        total += log_sum_exp(&scratch);
    }
    if total.is_nan() {
        return Err(Error::Numerical("log-likelihood is NaN".into()));
    }
    Ok(total)
}

/// Per-cell, per-cluster log densities (without mixture weights) plus,
/// optionally, zero-state responsibilities aligned to a [`ZeroPattern`].
pub(crate) struct Evaluated {
    /// N x K: log prod_g p(y_ng | cluster k).
    pub log_dens: Array2<f64>,
    /// Entry-major, cluster-minor buffer of length `pattern.nnz() * K`.
    pub u: Option<Vec<f64>>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-cluster cumulative table of ln Gamma(y + nu) - ln Gamma(nu), indexed
/// by count; exact finite sums of ln(nu + j).
fn nb_lnn_table(nu: f64, ymax: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(ymax + 1);
    t.push(0.0);
    for y in 1..=ymax {
        t.push(t[y - 1] + (nu + (y - 1) as f64).ln());
    }
    t
}

pub(crate) fn evaluate(
    params: &ModelParams,
    data: &EmData,
    zero: Option<&ZeroPattern>,
) -> Result<Evaluated> {
    let counts = data.counts.counts();
    let ymax = data.counts.max_count() as usize;
    let lgf = ln_factorial_table(ymax);
    match params {
        ModelParams::Zip(p) => Ok(eval_zip(p, counts, &lgf, zero)),
        ModelParams::Zinb(p) => Ok(eval_zinb(p, counts, &lgf, ymax, zero)),
        ModelParams::ZipReg(p) => Ok(eval_reg(p, None, data, &lgf, ymax, zero)),
        ModelParams::ZinbReg(p) => {
            let alpha = p
                .alpha
                .as_ref()
                .ok_or_else(|| Error::Domain("NB regression without alpha".into()))?;
            Ok(eval_reg(p, Some(alpha.view()), data, &lgf, ymax, zero))
        }
    }
}

fn eval_zip(
    p: &ZipParams,
    counts: &Array2<u32>,
    lgf: &[f64],
    zero: Option<&ZeroPattern>,
) -> Evaluated {
    let (n, g) = counts.dim();
    let k = p.pi.len();
    // K x G tables. The positive branch is pos_const + y ln(lambda) - ln y!,
    // and it also covers y = 0 up to the correction zero_lp - pos_const, so
    // a cell density is one dense dot product plus a sparse correction over
    // the cell's zero entries.
    let mut pos_const_sum = vec![0.0; k];
    let mut y_coef = Array2::zeros((k, g));
    let mut zero_corr = Array2::zeros((k, g));
    let mut u_prob = Array2::zeros((k, g));
    // phi = 1 puts all mass on zero; the folded tables cannot express that,
    // so those clusters take a dedicated branch below.
    let all_zero_cluster: Vec<bool> = p.phi.iter().map(|&v| v >= 1.0).collect();
    for j in 0..k {
        let phi = p.phi[j];
        if all_zero_cluster[j] {
            u_prob.row_mut(j).fill(1.0);
            continue;
        }
        let ln_phi = phi.ln();
        let ln1m = (-phi).ln_1p();
        for t in 0..g {
            let lam = p.lambda[[j, t]];
            let pos = ln1m - lam;
            pos_const_sum[j] += pos;
            y_coef[[j, t]] = lam.ln();
            zero_corr[[j, t]] = log_add_exp(ln_phi, pos) - pos;
            u_prob[[j, t]] = sigmoid(ln_phi - ln1m + lam);
        }
    }

    let per_cell: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let y = counts.row(i);
            let y = y.as_slice().expect("contiguous count row");
            let mut yf = vec![0.0f64; g];
            let mut zeros = Vec::new();
            let mut lgf_sum = 0.0;
            for (t, &yv) in y.iter().enumerate() {
                yf[t] = f64::from(yv);
                lgf_sum += lgf[yv as usize];
                if yv == 0 {
                    zeros.push(t);
                }
            }
            let mut dens = vec![0.0; k];
            for (j, slot) in dens.iter_mut().enumerate() {
                if all_zero_cluster[j] {
                    *slot = if zeros.len() == g {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    };
                    continue;
                }
                let yc = y_coef.row(j);
                let yc = yc.as_slice().expect("contiguous table row");
                let mut dot = 0.0;
                for t in 0..g {
                    dot += yf[t] * yc[t];
                }
                let zc = zero_corr.row(j);
                let zc = zc.as_slice().expect("contiguous table row");
                let mut corr = 0.0;
                for &t in &zeros {
                    corr += zc[t];
                }
                *slot = pos_const_sum[j] + dot - lgf_sum + corr;
            }
            let u = match zero {
                Some(zp) => {
                    let zg = zp.cell_genes(i);
                    let mut u = Vec::with_capacity(zg.len() * k);
                    for &t in zg {
                        for j in 0..k {
                            u.push(u_prob[[j, t as usize]]);
                        }
                    }
                    u
                }
                None => Vec::new(),
            };
            (dens, u)
        })
        .collect();

    assemble(per_cell, n, k, zero.is_some())
}

fn eval_zinb(
    p: &ZinbParams,
    counts: &Array2<u32>,
    lgf: &[f64],
    ymax: usize,
    zero: Option<&ZeroPattern>,
) -> Evaluated {
    let (n, g) = counts.dim();
    let k = p.pi.len();
    // Same dense-plus-sparse-correction layout as the ZIP path, with the
    // per-cluster ln Gamma(y + nu) - ln Gamma(nu) table folded in by count
    // lookup (entry 0 vanishes, so zero entries need no branch).
    let mut pos_const_sum = vec![0.0; k];
    let mut y_coef = Array2::zeros((k, g));
    let mut zero_corr = Array2::zeros((k, g));
    let mut u_prob = Array2::zeros((k, g));
    let lnn: Vec<Vec<f64>> = (0..k)
        .map(|j| nb_lnn_table(1.0 / p.alpha[j], ymax))
        .collect();
    let all_zero_cluster: Vec<bool> = p.phi.iter().map(|&v| v >= 1.0).collect();
    for j in 0..k {
        let phi = p.phi[j];
        if all_zero_cluster[j] {
            u_prob.row_mut(j).fill(1.0);
            continue;
        }
        let alpha = p.alpha[j];
        let nu = 1.0 / alpha;
        let ln_phi = phi.ln();
        let ln1m = (-phi).ln_1p();
        for t in 0..g {
            let am = alpha * p.mu[[j, t]];
            let l1p = am.ln_1p();
            let pos = ln1m - nu * l1p;
            pos_const_sum[j] += pos;
            y_coef[[j, t]] = am.ln() - l1p;
            zero_corr[[j, t]] = log_add_exp(ln_phi, pos) - pos;
            u_prob[[j, t]] = sigmoid(ln_phi - ln1m + nu * l1p);
        }
    }

    let per_cell: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let y = counts.row(i);
            let y = y.as_slice().expect("contiguous count row");
            let mut yf = vec![0.0f64; g];
            let mut zeros = Vec::new();
            let mut lgf_sum = 0.0;
            for (t, &yv) in y.iter().enumerate() {
                yf[t] = f64::from(yv);
                lgf_sum += lgf[yv as usize];
                if yv == 0 {
                    zeros.push(t);
                }
            }
            let mut dens = vec![0.0; k];
            for (j, slot) in dens.iter_mut().enumerate() {
                if all_zero_cluster[j] {
                    *slot = if zeros.len() == g {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    };
                    continue;
                }
                let yc = y_coef.row(j);
                let yc = yc.as_slice().expect("contiguous table row");
                let tab = &lnn[j];
                let mut dot = 0.0;
                let mut gamma_sum = 0.0;
                for t in 0..g {
                    dot += yf[t] * yc[t];
                    gamma_sum += tab[y[t] as usize];
                }
                let zc = zero_corr.row(j);
                let zc = zc.as_slice().expect("contiguous table row");
                let mut corr = 0.0;
                for &t in &zeros {
                    corr += zc[t];
                }
                *slot = pos_const_sum[j] + dot + gamma_sum - lgf_sum + corr;
            }
            let u = match zero {
                Some(zp) => {
                    let zg = zp.cell_genes(i);
                    let mut u = Vec::with_capacity(zg.len() * k);
                    for &t in zg {
                        for j in 0..k {
                            u.push(u_prob[[j, t as usize]]);
                        }
                    }
                    u
                }
                None => Vec::new(),
            };
            (dens, u)
        })
        .collect();

    assemble(per_cell, n, k, zero.is_some())
}

fn eval_reg(
    p: &RegParams,
    alpha: Option<ArrayView1<f64>>,
    data: &EmData,
    lgf: &[f64],
    ymax: usize,
    zero: Option<&ZeroPattern>,
) -> Evaluated {
    let counts = data.counts.counts();
    let (n, g) = counts.dim();
    let k = p.pi.len();
    let offsets = data.log_offsets();
    // Free coefficients beta0 + rho, gene-major.
    let mut free = Array2::zeros((g, k));
    for t in 0..g {
        for j in 0..k {
            free[[t, j]] = p.free_coef(t, j);
        }
    }
    // Covariate contribution per (cell, gene); shared across clusters.
    let xb: Option<Array2<f64>> = data.covariates.map(|x| x.values().dot(&p.beta.t()));
    let ln_phi: Vec<f64> = p.phi.iter().map(|&v| v.ln()).collect();
    let ln1m: Vec<f64> = p.phi.iter().map(|&v| (-v).ln_1p()).collect();
    let nb = alpha.map(|a| {
        let nu: Vec<f64> = a.iter().map(|&v| 1.0 / v).collect();
        let ln_alpha: Vec<f64> = a.iter().map(|&v| v.ln()).collect();
        let lnn: Vec<Vec<f64>> = nu.iter().map(|&v| nb_lnn_table(v, ymax)).collect();
        (a.to_vec(), nu, ln_alpha, lnn)
    });

    let per_cell: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let y = counts.row(i);
            let off = offsets[i];
            let mut dens = vec![0.0; k];
            let n_zero = zero.map_or(0, |zp| zp.cell_genes(i).len());
            let mut u = vec![0.0; n_zero * k];
            for j in 0..k {
                let mut acc = 0.0;
                let mut zi = 0usize;
                for t in 0..g {
                    let eta = off + free[[t, j]] + xb.as_ref().map_or(0.0, |m| m[[i, t]]);
                    let yv = y[t];
                    match &nb {
                        None => {
                            let lam = eta.exp();
                            if yv == 0 {
                                acc += log_add_exp(ln_phi[j], ln1m[j] - lam);
                                if zero.is_some() {
                                    u[zi * k + j] = sigmoid(ln_phi[j] - ln1m[j] + lam);
                                    zi += 1;
                                }
                            } else {
                                acc += ln1m[j] - lam + f64::from(yv) * eta - lgf[yv as usize];
                            }
                        }
                        Some((a, nu, ln_a, lnn)) => {
                            let mu = eta.exp();
                            let l1p = (a[j] * mu).ln_1p();
                            if yv == 0 {
                                acc += log_add_exp(ln_phi[j], ln1m[j] - nu[j] * l1p);
                                if zero.is_some() {
                                    u[zi * k + j] = sigmoid(ln_phi[j] - ln1m[j] + nu[j] * l1p);
                                    zi += 1;
                                }
                            } else {
                                let yf = f64::from(yv);
                                acc += ln1m[j] - nu[j] * l1p
                                    + yf * (ln_a[j] + eta - l1p)
                                    + lnn[j][yv as usize]
                                    - lgf[yv as usize];
                            }
                        }
                    }
                }
                dens[j] = acc;
            }
            (dens, u)
        })
        .collect();

    assemble(per_cell, n, k, zero.is_some())
}

fn assemble(per_cell: Vec<(Vec<f64>, Vec<f64>)>, n: usize, k: usize, want_u: bool) -> Evaluated {
    let mut dens = Vec::with_capacity(n * k);
    let mut u = if want_u { Some(Vec::new()) } else { None };
    for (row, cell_u) in per_cell {
        dens.extend_from_slice(&row);
        if let Some(buf) = u.as_mut() {
            buf.extend_from_slice(&cell_u);
        }
    }
    Evaluated {
        log_dens: Array2::from_shape_vec((n, k), dens).expect("row assembly"),
        u,
    }
}

/// Rates of one cluster of a regression model, as an N x G matrix.
pub(crate) fn reg_rates_for_cluster(p: &RegParams, data: &EmData, cluster: usize) -> Array2<f64> {
    let (n, g) = (data.n_cells(), data.n_genes());
    let offsets = data.log_offsets();
    let xb: Option<Array2<f64>> = data.covariates.map(|x| x.values().dot(&p.beta.t()));
    let mut out = Array2::zeros((n, g));
    for i in 0..n {
        for t in 0..g {
            let eta = offsets[i] + p.free_coef(t, cluster) + xb.as_ref().map_or(0.0, |m| m[[i, t]]);
            out[[i, t]] = eta.exp();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CountMatrix;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn zip_zero_branch_reference_values() {
        // Pure Poisson zero mass and the certain always-zero state.
        assert!((zip_log_pmf(0, 1.0, 0.0).unwrap() - (-1.0)).abs() < 1e-15);
        assert_eq!(zip_log_pmf(0, 123.0, 1.0).unwrap(), 0.0);
        // Direct evaluation of the positive branch.
        let expect = (0.9 * (-1.5f64).exp() * 1.5f64.powi(2) / 2.0).ln();
        assert!((zip_log_pmf(2, 1.5, 0.1).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn zip_zero_branch_is_stable_for_large_rates() {
        // phi + (1-phi) e^-lambda with e^-lambda underflowing: answer ~ ln phi.
        let v = zip_log_pmf(0, 800.0, 0.1).unwrap();
        assert!((v - 0.1f64.ln()).abs() < 1e-12);
        assert!(v.is_finite());
    }

    #[test]
    fn zip_domain_errors() {
        assert!(zip_log_pmf(1, 0.0, 0.1).is_err());
        assert!(zip_log_pmf(1, -2.0, 0.1).is_err());
        assert!(zip_log_pmf(1, 1.0, -0.1).is_err());
        assert!(zip_log_pmf(1, 1.0, 1.5).is_err());
    }

    #[test]
    fn zinb_reference_values() {
        assert_eq!(zinb_log_pmf(0, 5.0, 0.3, 1.0).unwrap(), 0.0);
        // Geometric case: p(1) = (1/(1+mu)) * (mu/(1+mu)) with mu = 2.
        let expect = (2.0f64 / 9.0).ln();
        assert!((zinb_log_pmf(1, 2.0, 1.0, 0.0).unwrap() - expect).abs() < 1e-12);
        assert!(zinb_log_pmf(1, 2.0, 0.0, 0.0).is_err());
        assert!(zinb_log_pmf(1, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn zinb_approaches_zip_for_tiny_alpha() {
        for y in [0u32, 1, 3, 9] {
            for &(mu, phi) in &[(2.0, 0.1), (0.5, 0.0), (7.0, 0.4)] {
                let nb = zinb_log_pmf(y, mu, 1e-8, phi).unwrap();
                let pois = zip_log_pmf(y, mu, phi).unwrap();
                assert!(
                    (nb - pois).abs() < 1e-4,
                    "y={y} mu={mu} phi={phi}: {nb} vs {pois}"
                );
            }
        }
    }

    fn truncated_mass_zip(lambda: f64, phi: f64) -> f64 {
        let ymax = (lambda + 20.0 * lambda.sqrt() + 20.0).ceil() as u32;
        (0..=ymax)
            .map(|y| zip_log_pmf(y, lambda, phi).unwrap().exp())
            .sum()
    }

    fn truncated_mass_zinb(mu: f64, alpha: f64, phi: f64) -> f64 {
        let ymax = ((mu + 20.0 * mu.sqrt() + 20.0) * (1.0 + alpha * mu)).ceil() as u32;
        (0..=ymax)
            .map(|y| zinb_log_pmf(y, mu, alpha, phi).unwrap().exp())
            .sum()
    }

    #[test]
    fn truncated_sums_normalize() {
        for &(lambda, phi) in &[(0.3, 0.0), (4.0, 0.2), (40.0, 0.9), (150.0, 0.5)] {
            let m = truncated_mass_zip(lambda, phi);
            assert!(
                m > 1.0 - 1e-10 && m < 1.0 + 1e-9,
                "zip({lambda},{phi}) -> {m}"
            );
        }
        for &(mu, alpha, phi) in &[(0.5, 0.05, 0.0), (5.0, 0.2, 0.1), (30.0, 1.5, 0.6)] {
            let m = truncated_mass_zinb(mu, alpha, phi);
            assert!(
                m > 1.0 - 1e-10 && m < 1.0 + 1e-9,
                "zinb({mu},{alpha},{phi}) -> {m}"
            );
        }
    }

    #[test]
    fn linpred_rate_reference_values() {
        assert!((linpred_rate(1.0, 0.0, 0.0, &[], &[]).unwrap() - 1.0).abs() < 1e-15);
        assert!((linpred_rate(2.0, 0.5, -0.5, &[], &[]).unwrap() - 2.0).abs() < 1e-12);
        let v = linpred_rate(10.0, 0.85, 2.0, &[], &[]).unwrap();
        assert!((v - 10.0 * (2.85f64).exp()).abs() < 1e-9);
        assert!(matches!(
            linpred_rate(1.0, 800.0, 0.0, &[], &[]),
            Err(Error::Overflow(_))
        ));
        assert!(linpred_rate(0.0, 0.0, 0.0, &[], &[]).is_err());
    }

    fn toy_zip() -> (ModelParams, CountMatrix) {
        let params = ModelParams::Zip(ZipParams {
            pi: array![0.3, 0.7],
            phi: array![0.1, 0.25],
            lambda: array![[1.0, 4.0], [2.5, 0.7]],
        });
        let counts = CountMatrix::with_default_ids(array![[0, 3], [1, 0], [5, 2]]).unwrap();
        (params, counts)
    }

    #[test]
    fn mixture_loglik_matches_brute_force_product() {
        let (params, counts) = toy_zip();
        let data = EmData::new(&counts);
        let got = mixture_loglik(&params, &data).unwrap();
        // Naive product-then-log evaluation on the tiny instance.
        let (pi, phi, lambda) = match &params {
            ModelParams::Zip(p) => (&p.pi, &p.phi, &p.lambda),
            _ => unreachable!(),
        };
        let mut expect = 0.0;
        for i in 0..3 {
            let mut cell = 0.0;
            for j in 0..2 {
                let mut prod = pi[j];
                for t in 0..2 {
                    let y = counts.counts()[[i, t]];
                    prod *= zip_log_pmf(y, lambda[[j, t]], phi[j]).unwrap().exp();
                }
                cell += prod;
            }
            expect += cell.ln();
        }
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn mixture_loglik_single_cluster_is_plain_sum() {
        let params = ModelParams::Zip(ZipParams {
            pi: array![1.0],
            phi: array![0.2],
            lambda: array![[1.5, 0.5]],
        });
        let counts = CountMatrix::with_default_ids(array![[2, 0], [0, 1]]).unwrap();
        let data = EmData::new(&counts);
        let got = mixture_loglik(&params, &data).unwrap();
        let mut expect = 0.0;
        for i in 0..2 {
            for t in 0..2 {
                expect += zip_log_pmf(counts.counts()[[i, t]], [1.5, 0.5][t], 0.2).unwrap();
            }
        }
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn duplicating_cells_doubles_the_loglik() {
        let (params, counts) = toy_zip();
        let single = mixture_loglik(&params, &EmData::new(&counts)).unwrap();
        let mut doubled = counts.counts().clone();
        doubled
            .append(ndarray::Axis(0), counts.counts().view())
            .unwrap();
        let doubled = CountMatrix::with_default_ids(doubled).unwrap();
        let got = mixture_loglik(&params, &EmData::new(&doubled)).unwrap();
        assert!((got - 2.0 * single).abs() < 1e-10);
    }

    #[test]
    fn loglik_invariant_under_cluster_permutation() {
        let (params, counts) = toy_zip();
        let data = EmData::new(&counts);
        let base = mixture_loglik(&params, &data).unwrap();
        let permuted = params.permute_clusters(&[1, 0]);
        let swapped = mixture_loglik(&permuted, &data).unwrap();
        assert!((base - swapped).abs() < 1e-12);
    }

    #[test]
    fn mixture_loglik_with_certain_zero_cluster() {
        // One cluster with phi = 1 contributes only to all-zero cells.
        let params = ModelParams::Zip(ZipParams {
            pi: array![0.5, 0.5],
            phi: array![1.0, 0.0],
            lambda: array![[1.0, 1.0], [2.0, 3.0]],
        });
        let counts = CountMatrix::with_default_ids(array![[0u32, 0], [1, 2]]).unwrap();
        let data = EmData::new(&counts);
        let got = mixture_loglik(&params, &data).unwrap();
        // Cell 1: 0.5 * 1 + 0.5 * P(0|2)P(0|3); cell 2: 0.5 * P(1|2)P(2|3).
        let c1 = 0.5 + 0.5 * ((-2.0f64).exp() * (-3.0f64).exp());
        let c2: f64 = 0.5
            * (zip_log_pmf(1, 2.0, 0.0).unwrap().exp() * zip_log_pmf(2, 3.0, 0.0).unwrap().exp());
        assert!((got - (c1.ln() + c2.ln())).abs() < 1e-12);
    }

    #[test]
    fn zero_pattern_indexes_zero_entries() {
        let counts = array![[0u32, 3, 0], [1, 0, 2]];
        let zp = ZeroPattern::build(&counts);
        assert_eq!(zp.nnz(), 3);
        assert_eq!(zp.cell_genes(0), &[0, 2]);
        assert_eq!(zp.cell_genes(1), &[1]);
    }

    proptest! {
        // zip_log_pmf(0, lambda, phi) is non-decreasing in phi.
        #[test]
        fn zip_zero_mass_monotone_in_phi(
            lambda in 0.01f64..50.0,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let v_lo = zip_log_pmf(0, lambda, lo).unwrap();
            let v_hi = zip_log_pmf(0, lambda, hi).unwrap();
            prop_assert!(v_hi >= v_lo - 1e-12);
        }

        #[test]
        fn zinb_matches_zip_in_the_small_alpha_limit(
            mu in 0.05f64..30.0,
            phi in 0.0f64..0.95,
            y in 0u32..40,
        ) {
            let nb = zinb_log_pmf(y, mu, 1e-8, phi).unwrap();
            let pois = zip_log_pmf(y, mu, phi).unwrap();
            prop_assert!((nb - pois).abs() < 1e-4);
        }
    }
}
