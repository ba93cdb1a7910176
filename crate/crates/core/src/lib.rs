//! Model-based clustering of cell x gene count matrices.
//!
//! Fits mixtures of zero-inflated Poisson or zero-inflated negative binomial
//! distributions by EM/ECM, with optional size factors and covariates
//! entering the rates through a log link. Ships gene filtering, k-means and
//! random initialization with multi-restart orchestration, AIC/BIC plus
//! elbow selection of the number of clusters, and a simulation lab with the
//! matching evaluation metrics.

pub mod data;
pub mod em;
pub mod error;
pub mod glm;
pub mod init;
pub mod kernels;
pub mod metrics;
pub mod params;
pub mod select;
pub mod sim;
pub mod special;

pub use data::{
    compute_size_factors, filter_genes_iqr, load_counts, select_top_sd, write_dense_csv,
    write_matrix_market, CountFormat, CountMatrix, CovariateMatrix, EmData, SizeFactors,
};
pub use em::{
    assign_clusters, e_step, m_step_closed, run_em, ClosedUpdates, EStepResult, EmOptions,
    FitResult, ZeroResponsibilities,
};
pub use error::{Error, Result};
pub use glm::{
    fit_gene_nb, fit_gene_poisson, objective_and_grad, reparameterize, solve_alpha, AlphaBound,
    AlphaEstimate, GeneCoefficients, GeneRegressionProblem,
};
pub use init::{init_kmeans, init_random, InitMethod};
pub use kernels::{linpred_rate, mixture_loglik, zinb_log_pmf, zip_log_pmf, ZeroPattern};
pub use metrics::{
    align_labels, co_clustering, confusion_matrix, mad_rates, mse_rates, v_measure, AlignedFit,
    RateErrors,
};
pub use params::{ModelParams, RegParams, Variant, ZinbParams, ZipParams};
pub use select::{
    aic, bic, elbow_select, param_count, run_selection, ElbowChoice, RestartPlan, RestartRecord,
    SelectionCell, SelectionReport,
};
pub use sim::{
    preset, simulate, simulate_replicate, NormalSpec, RateSpec, RhoPattern, SimConfig, SimDataset,
    SimTruth, SimVariant, PRESET_NAMES,
};
