//! Mixture parameter containers for the four model variants.

use ndarray::{Array1, Array2};

use crate::data::EmData;
use crate::error::{Error, Result};

/// Tolerance on the mixture-weight simplex constraint.
pub const SIMPLEX_TOL: f64 = 1e-12;
/// Tolerance on the per-gene zero-sum constraint of cluster effects.
pub const RHO_SUM_TOL: f64 = 1e-9;

/// The fitted model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Zero-inflated Poisson, one rate per (gene, cluster).
    Zip,
    /// Zero-inflated Poisson with log-linked rates (size factor, optional covariates).
    ZipReg,
    /// Zero-inflated negative binomial, one mean per (gene, cluster).
    Zinb,
    /// Zero-inflated negative binomial with log-linked means.
    ZinbReg,
}

impl Variant {
    pub fn is_nb(self) -> bool {
        matches!(self, Variant::Zinb | Variant::ZinbReg)
    }

    pub fn is_regression(self) -> bool {
        matches!(self, Variant::ZipReg | Variant::ZinbReg)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Zip => "zip",
            Variant::ZipReg => "zip-reg",
            Variant::Zinb => "zinb",
            Variant::ZinbReg => "zinb-reg",
        };
        f.write_str(s)
    }
}

/// Parameters of a ZIP mixture: weights, zero-inflation, and K x G rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ZipParams {
    pub pi: Array1<f64>,
    pub phi: Array1<f64>,
    /// Poisson rates, cluster-major (row k holds the rates of cluster k).
    pub lambda: Array2<f64>,
}

/// Parameters of a ZINB mixture; dispersion is per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ZinbParams {
    pub pi: Array1<f64>,
    pub phi: Array1<f64>,
    /// Negative binomial means, cluster-major.
    pub mu: Array2<f64>,
    /// Dispersions alpha_k > 0; the size parameter is nu_k = 1/alpha_k.
    pub alpha: Array1<f64>,
}

impl ZinbParams {
    /// Size parameters nu_k = 1/alpha_k.
    pub fn nu(&self) -> Array1<f64> {
        self.alpha.mapv(|a| 1.0 / a)
    }
}

/// Parameters of the log-linked variants: a per-gene baseline, per-gene
/// cluster effects constrained to sum to zero, shared covariate slopes, and
/// (for NB) per-cluster dispersions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegParams {
    pub pi: Array1<f64>,
    pub phi: Array1<f64>,
    /// Baseline log expression per gene (length G).
    pub beta0: Array1<f64>,
    /// Cluster effects, G x K, with each row summing to zero.
    pub rho: Array2<f64>,
    /// Covariate coefficients, G x P (P may be zero).
    pub beta: Array2<f64>,
    /// Dispersions, present only for the NB variant.
    pub alpha: Option<Array1<f64>>,
}

impl RegParams {
    /// Free per-cluster intercept beta0_g + rho_gk.
    pub fn free_coef(&self, gene: usize, cluster: usize) -> f64 {
        self.beta0[gene] + self.rho[[gene, cluster]]
    }

    pub fn n_covariates(&self) -> usize {
        self.beta.ncols()
    }
}

/// A parameter set tagged with its model variant.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Zip(ZipParams),
    Zinb(ZinbParams),
    ZipReg(RegParams),
    ZinbReg(RegParams),
}

impl ModelParams {
    pub fn variant(&self) -> Variant {
        match self {
            ModelParams::Zip(_) => Variant::Zip,
            ModelParams::Zinb(_) => Variant::Zinb,
            ModelParams::ZipReg(_) => Variant::ZipReg,
            ModelParams::ZinbReg(_) => Variant::ZinbReg,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.pi().len()
    }

    pub fn n_genes(&self) -> usize {
        match self {
            ModelParams::Zip(p) => p.lambda.ncols(),
            ModelParams::Zinb(p) => p.mu.ncols(),
            ModelParams::ZipReg(p) | ModelParams::ZinbReg(p) => p.beta0.len(),
        }
    }

    pub fn n_covariates(&self) -> usize {
        match self {
            ModelParams::ZipReg(p) | ModelParams::ZinbReg(p) => p.n_covariates(),
            _ => 0,
        }
    }

    pub fn pi(&self) -> &Array1<f64> {
        match self {
            ModelParams::Zip(p) => &p.pi,
            ModelParams::Zinb(p) => &p.pi,
            ModelParams::ZipReg(p) | ModelParams::ZinbReg(p) => &p.pi,
        }
    }

    pub fn phi(&self) -> &Array1<f64> {
        match self {
            ModelParams::Zip(p) => &p.phi,
            ModelParams::Zinb(p) => &p.phi,
            ModelParams::ZipReg(p) | ModelParams::ZinbReg(p) => &p.phi,
        }
    }

    pub fn as_reg(&self) -> Option<&RegParams> {
        match self {
            ModelParams::ZipReg(p) | ModelParams::ZinbReg(p) => Some(p),
            _ => None,
        }
    }

    /// Check intrinsic invariants (simplex, ranges, positivity, zero sums).
    pub fn validate(&self) -> Result<()> {
        let pi = self.pi();
        let phi = self.phi();
        let k = pi.len();
        if k == 0 {
            return Err(Error::Dimension("no clusters".into()));
        }
        if phi.len() != k {
            return Err(Error::Dimension(format!(
                "phi has {} entries for {k} clusters",
                phi.len()
            )));
        }
        let sum: f64 = pi.sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL || pi.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Domain(format!(
                "pi must be a probability simplex, sums to {sum}"
            )));
        }
        if phi
            .iter()
            .any(|&p| !p.is_finite() || !(0.0..=1.0).contains(&p))
        {
            return Err(Error::Domain("phi entries must lie in [0, 1]".into()));
        }
        match self {
            ModelParams::Zip(p) => {
                if p.lambda.nrows() != k {
                    return Err(Error::Dimension("lambda rows != K".into()));
                }
                if p.lambda.iter().any(|&l| !l.is_finite() || l <= 0.0) {
                    return Err(Error::Domain("lambda entries must be > 0".into()));
                }
            }
            ModelParams::Zinb(p) => {
                if p.mu.nrows() != k || p.alpha.len() != k {
                    return Err(Error::Dimension("mu/alpha shape mismatch".into()));
                }
                if p.mu.iter().any(|&m| !m.is_finite() || m <= 0.0) {
                    return Err(Error::Domain("mu entries must be > 0".into()));
                }
                if p.alpha.iter().any(|&a| !a.is_finite() || a <= 0.0) {
                    return Err(Error::Domain("alpha entries must be > 0".into()));
                }
            }
            ModelParams::ZipReg(p) | ModelParams::ZinbReg(p) => {
                let g = p.beta0.len();
                if p.rho.dim() != (g, k) {
                    return Err(Error::Dimension(format!(
                        "rho is {:?}, expected ({g}, {k})",
                        p.rho.dim()
                    )));
                }
                if p.beta.nrows() != g {
                    return Err(Error::Dimension("beta rows != G".into()));
                }
                let finite = p.beta0.iter().chain(p.rho.iter()).chain(p.beta.iter());
                if finite.into_iter().any(|v| !v.is_finite()) {
                    return Err(Error::Domain(
                        "regression coefficients must be finite".into(),
                    ));
                }
                for (gene, row) in p.rho.rows().into_iter().enumerate() {
                    let s: f64 = row.sum();
                    if s.abs() > RHO_SUM_TOL {
                        return Err(Error::Domain(format!(
                            "rho row {gene} sums to {s}, must be 0"
                        )));
                    }
                }
                match (&p.alpha, self.variant().is_nb()) {
                    (Some(a), true) => {
                        if a.len() != k {
                            return Err(Error::Dimension("alpha length != K".into()));
                        }
                        if a.iter().any(|&v| !v.is_finite() || v <= 0.0) {
                            return Err(Error::Domain("alpha entries must be > 0".into()));
                        }
                    }
                    (None, false) => {}
                    (Some(_), false) => {
                        return Err(Error::Domain("Poisson variant carries alpha".into()))
                    }
                    (None, true) => return Err(Error::Domain("NB variant lacks alpha".into())),
                }
            }
        }
        Ok(())
    }

    /// Check that parameter dimensions agree with a data bundle.
    pub fn check_data(&self, data: &EmData) -> Result<()> {
        self.validate()?;
        data.validate()?;
        if self.n_genes() != data.n_genes() {
            return Err(Error::Dimension(format!(
                "parameters cover {} genes, data has {}",
                self.n_genes(),
                data.n_genes()
            )));
        }
        if self.n_covariates() != data.n_covariates() {
            return Err(Error::Dimension(format!(
                "parameters expect {} covariates, data has {}",
                self.n_covariates(),
                data.n_covariates()
            )));
        }
        Ok(())
    }

    /// Reindex clusters so that output cluster `j` is input cluster `perm[j]`.
    pub fn permute_clusters(&self, perm: &[usize]) -> Self {
        let take1 = |v: &Array1<f64>| Array1::from_iter(perm.iter().map(|&s| v[s]));
        let take_rows = |m: &Array2<f64>| {
            let mut out = Array2::zeros((perm.len(), m.ncols()));
            for (dst, &src) in perm.iter().enumerate() {
                out.row_mut(dst).assign(&m.row(src));
            }
            out
        };
        let take_cols = |m: &Array2<f64>| {
            let mut out = Array2::zeros((m.nrows(), perm.len()));
            for (dst, &src) in perm.iter().enumerate() {
                out.column_mut(dst).assign(&m.column(src));
            }
            out
        };
        match self {
            ModelParams::Zip(p) => ModelParams::Zip(ZipParams {
                pi: take1(&p.pi),
                phi: take1(&p.phi),
                lambda: take_rows(&p.lambda),
            }),
            ModelParams::Zinb(p) => ModelParams::Zinb(ZinbParams {
                pi: take1(&p.pi),
                phi: take1(&p.phi),
                mu: take_rows(&p.mu),
                alpha: take1(&p.alpha),
            }),
            ModelParams::ZipReg(p) => ModelParams::ZipReg(RegParams {
                pi: take1(&p.pi),
                phi: take1(&p.phi),
                beta0: p.beta0.clone(),
                rho: take_cols(&p.rho),
                beta: p.beta.clone(),
                alpha: None,
            }),
            ModelParams::ZinbReg(p) => ModelParams::ZinbReg(RegParams {
                pi: take1(&p.pi),
                phi: take1(&p.phi),
                beta0: p.beta0.clone(),
                rho: take_cols(&p.rho),
                beta: p.beta.clone(),
                alpha: p.alpha.as_ref().map(take1),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn validate_catches_broken_simplex_and_ranges() {
        let good = ModelParams::Zip(ZipParams {
            pi: array![0.4, 0.6],
            phi: array![0.1, 0.0],
            lambda: array![[1.0, 2.0], [3.0, 4.0]],
        });
        assert!(good.validate().is_ok());

        let bad_pi = ModelParams::Zip(ZipParams {
            pi: array![0.4, 0.7],
            phi: array![0.1, 0.0],
            lambda: array![[1.0, 2.0], [3.0, 4.0]],
        });
        assert!(bad_pi.validate().is_err());

        let bad_lambda = ModelParams::Zip(ZipParams {
            pi: array![0.5, 0.5],
            phi: array![0.1, 0.0],
            lambda: array![[1.0, 0.0], [3.0, 4.0]],
        });
        assert!(bad_lambda.validate().is_err());
    }

    #[test]
    fn validate_enforces_rho_zero_sum() {
        let p = RegParams {
            pi: array![0.5, 0.5],
            phi: array![0.0, 0.0],
            beta0: array![1.0],
            rho: array![[0.5, -0.5]],
            beta: Array2::zeros((1, 0)),
            alpha: None,
        };
        assert!(ModelParams::ZipReg(p.clone()).validate().is_ok());
        let mut broken = p;
        broken.rho[[0, 0]] = 0.6;
        assert!(ModelParams::ZipReg(broken).validate().is_err());
    }

    #[test]
    fn permutation_round_trips() {
        let p = ModelParams::Zinb(ZinbParams {
            pi: array![0.2, 0.3, 0.5],
            phi: array![0.0, 0.1, 0.2],
            mu: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            alpha: array![0.1, 0.2, 0.3],
        });
        let perm = [2usize, 0, 1];
        let inverse = [1usize, 2, 0];
        let back = p.permute_clusters(&perm).permute_clusters(&inverse);
        assert_eq!(back, p);
    }
}
