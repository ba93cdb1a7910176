//! JSON schemas of the fit report and the simulation truth files, plus the
//! conversions between core parameter containers and their wire form.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use zimclust_core::{ModelParams, RegParams, SelectionReport, ZinbParams, ZipParams};

use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

/// Wire form of a parameter set. `lambda`/`mu` are cluster-major (K rows of
/// G rates); `rho` and `beta` are gene-major (G rows).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum ParamsDto {
    Zip {
        pi: Vec<f64>,
        phi: Vec<f64>,
        lambda: Vec<Vec<f64>>,
    },
    Zinb {
        pi: Vec<f64>,
        phi: Vec<f64>,
        mu: Vec<Vec<f64>>,
        alpha: Vec<f64>,
        nu: Vec<f64>,
    },
    ZipReg {
        pi: Vec<f64>,
        phi: Vec<f64>,
        beta0: Vec<f64>,
        rho: Vec<Vec<f64>>,
        beta: Vec<Vec<f64>>,
    },
    ZinbReg {
        pi: Vec<f64>,
        phi: Vec<f64>,
        beta0: Vec<f64>,
        rho: Vec<Vec<f64>>,
        beta: Vec<Vec<f64>>,
        alpha: Vec<f64>,
        nu: Vec<f64>,
    },
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Data(format!("ragged {what} matrix")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((nrows, ncols), flat).map_err(|e| CliError::Data(format!("{what}: {e}")))
}

impl ParamsDto {
    pub fn from_params(params: &ModelParams) -> Self {
        match params {
            ModelParams::Zip(p) => ParamsDto::Zip {
                pi: p.pi.to_vec(),
                phi: p.phi.to_vec(),
                lambda: rows(&p.lambda),
            },
            ModelParams::Zinb(p) => ParamsDto::Zinb {
                pi: p.pi.to_vec(),
                phi: p.phi.to_vec(),
                mu: rows(&p.mu),
                alpha: p.alpha.to_vec(),
                nu: p.nu().to_vec(),
            },
            ModelParams::ZipReg(p) => ParamsDto::ZipReg {
                pi: p.pi.to_vec(),
                phi: p.phi.to_vec(),
                beta0: p.beta0.to_vec(),
                rho: rows(&p.rho),
                beta: rows(&p.beta),
            },
            ModelParams::ZinbReg(p) => {
                let alpha = p.alpha.clone().expect("NB params carry alpha");
                ParamsDto::ZinbReg {
                    pi: p.pi.to_vec(),
                    phi: p.phi.to_vec(),
                    beta0: p.beta0.to_vec(),
                    rho: rows(&p.rho),
                    beta: rows(&p.beta),
                    nu: alpha.iter().map(|a| 1.0 / a).collect(),
                    alpha: alpha.to_vec(),
                }
            }
        }
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        let params = match self {
            ParamsDto::Zip { pi, phi, lambda } => ModelParams::Zip(ZipParams {
                pi: Array1::from_vec(pi.clone()),
                phi: Array1::from_vec(phi.clone()),
                lambda: from_rows(lambda, "lambda")?,
            }),
            ParamsDto::Zinb {
                pi, phi, mu, alpha, ..
            } => ModelParams::Zinb(ZinbParams {
                pi: Array1::from_vec(pi.clone()),
                phi: Array1::from_vec(phi.clone()),
                mu: from_rows(mu, "mu")?,
                alpha: Array1::from_vec(alpha.clone()),
            }),
            ParamsDto::ZipReg {
                pi,
                phi,
                beta0,
                rho,
                beta,
            } => ModelParams::ZipReg(RegParams {
                pi: Array1::from_vec(pi.clone()),
                phi: Array1::from_vec(phi.clone()),
                beta0: Array1::from_vec(beta0.clone()),
                rho: from_rows(rho, "rho")?,
                beta: from_rows(beta, "beta")?,
                alpha: None,
            }),
            ParamsDto::ZinbReg {
                pi,
                phi,
                beta0,
                rho,
                beta,
                alpha,
                ..
            } => ModelParams::ZinbReg(RegParams {
                pi: Array1::from_vec(pi.clone()),
                phi: Array1::from_vec(phi.clone()),
                beta0: Array1::from_vec(beta0.clone()),
                rho: from_rows(rho, "rho")?,
                beta: from_rows(beta, "beta")?,
                alpha: Some(Array1::from_vec(alpha.clone())),
            }),
        };
        params
            .validate()
            .map_err(|e| CliError::Data(format!("invalid parameters in file: {e}")))?;
        Ok(params)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartDto {
    pub seed: u64,
    pub loglik: Option<f64>,
    pub aic: Option<f64>,
    pub converged: Option<bool>,
    pub n_iter: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellDto {
    pub k: usize,
    pub init: String,
    pub best_aic: Option<f64>,
    pub best_seed: Option<u64>,
    pub restarts: Vec<RestartDto>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElbowDto {
    pub init: String,
    pub k: usize,
    pub degenerate: bool,
    pub non_monotone: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChosenDto {
    pub k: usize,
    pub init: String,
    pub aic: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionDto {
    pub cells: Vec<CellDto>,
    pub elbow: Vec<ElbowDto>,
    pub chosen: ChosenDto,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDto {
    pub params: ParamsDto,
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub loglik_trace: Vec<f64>,
    /// 1-based cluster labels, aligned with `cell_ids`.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterDto {
    pub iqr_threshold: Option<f64>,
    pub top_sd: Option<usize>,
    pub genes_before: usize,
    pub genes_after: usize,
}

/// The single JSON document written by `zimclust fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub manifest: RunManifest,
    pub model: String,
    pub k_values: Vec<usize>,
    pub init_methods: Vec<String>,
    pub restarts: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub n_cells: usize,
    pub n_genes: usize,
    pub cell_ids: Vec<String>,
    pub gene_ids: Vec<String>,
    pub filter: Option<FilterDto>,
    pub selection: SelectionDto,
    pub fit: FitDto,
}

pub fn selection_dto(report: &SelectionReport) -> SelectionDto {
    let cells = report
        .cells
        .iter()
        .map(|c| {
            let best_seed = c
                .best_aic
                .and_then(|a| c.runs.iter().find(|r| r.aic == Some(a)).map(|r| r.seed));
            CellDto {
                k: c.k,
                init: c.method.to_string(),
                best_aic: c.best_aic,
                best_seed,
                restarts: c
                    .runs
                    .iter()
                    .map(|r| RestartDto {
                        seed: r.seed,
                        loglik: r.loglik,
                        aic: r.aic,
                        converged: r.converged,
                        n_iter: r.n_iter,
                        error: r.error.clone(),
                    })
                    .collect(),
            }
        })
        .collect();
    let elbow = report
        .elbow
        .iter()
        .map(|(method, choice)| ElbowDto {
            init: method.to_string(),
            k: choice.k,
            degenerate: choice.degenerate,
            non_monotone: choice.non_monotone,
        })
        .collect();
    SelectionDto {
        cells,
        elbow,
        chosen: ChosenDto {
            k: report.chosen_k,
            init: report.chosen_method.to_string(),
            aic: report.chosen_aic,
        },
    }
}

/// Truth sidecar written by `zimclust simulate`, one per replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub scenario: Option<String>,
    pub case: Option<usize>,
    pub replicate: usize,
    pub seed: u64,
    /// 1-based cluster labels per cell.
    pub labels: Vec<usize>,
    pub params: ParamsDto,
    /// 0-based (cell, gene) positions drawn in the always-zero state.
    pub always_zero: Vec<(usize, usize)>,
}
