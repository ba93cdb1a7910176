//! `zimclust evaluate`: compare a fit report against a truth sidecar and
//! emit a long-format metrics CSV (V-measure, confusion, co-clustering, and
//! aligned per-cluster MSE/MAD when the parameter shapes agree).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use zimclust_core::{
    align_labels, co_clustering, confusion_matrix, mad_rates, mse_rates, v_measure, AlignedFit,
};

use crate::error::{CliError, Result};
use crate::report::{FitReport, TruthFile};
use crate::EvaluateArgs;

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let fit: FitReport = serde_json::from_reader(BufReader::new(File::open(&args.fit)?))?;
    let truth: TruthFile = serde_json::from_reader(BufReader::new(File::open(&args.truth)?))?;

    if fit.fit.labels.len() != truth.labels.len() {
        return Err(CliError::Data(format!(
            "label length mismatch: fit has {}, truth has {}",
            fit.fit.labels.len(),
            truth.labels.len()
        )));
    }

    let mut w = BufWriter::new(File::create(&args.out)?);
    writeln!(w, "metric,row,col,value")?;

    let v = v_measure(&truth.labels, &fit.fit.labels)?;
    writeln!(w, "v_measure,,,{v}")?;

    let (rows, cols, confusion) = confusion_matrix(&truth.labels, &fit.fit.labels)?;
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            writeln!(w, "confusion,{r},{c},{}", confusion[[i, j]])?;
        }
    }
    let (rows, cols, pct) = co_clustering(&truth.labels, &fit.fit.labels)?;
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            writeln!(w, "co_clustering,{r},{c},{}", pct[[i, j]])?;
        }
    }

    // Parameter-level errors need matching variants and a square confusion
    // matrix to define the cluster alignment.
    let truth_params = truth.params.to_params()?;
    let fit_params = fit.fit.params.to_params()?;
    if truth_params.variant() == fit_params.variant()
        && truth_params.n_clusters() == fit_params.n_clusters()
        && truth_params.n_genes() == fit_params.n_genes()
        && confusion.nrows() == confusion.ncols()
        && confusion.nrows() == truth_params.n_clusters()
    {
        let perm = align_labels(&confusion)?;
        for (k, &j) in perm.iter().enumerate() {
            writeln!(w, "alignment,{},,{}", k + 1, j + 1)?;
        }
        let aligned = [AlignedFit {
            params: &fit_params,
            alignment: &perm,
        }];
        let mse = mse_rates(&truth_params, &aligned)?;
        let mad = mad_rates(&truth_params, &aligned)?;
        for (k, v) in mse.per_cluster.iter().enumerate() {
            writeln!(w, "mse_rate,{},,{v}", k + 1)?;
        }
        for (k, v) in mad.per_cluster.iter().enumerate() {
            writeln!(w, "mad_rate,{},,{v}", k + 1)?;
        }
        if let Some(v) = mse.beta0 {
            writeln!(w, "mse_beta0,,,{v}")?;
        }
        if let Some(v) = mad.beta0 {
            writeln!(w, "mad_beta0,,,{v}")?;
        }
        if let Some(per_p) = mse.per_covariate {
            for (p, v) in per_p.iter().enumerate() {
                writeln!(w, "mse_beta,,{},{v}", p + 1)?;
            }
        }
        if let Some(per_p) = mad.per_covariate {
            for (p, v) in per_p.iter().enumerate() {
                writeln!(w, "mad_beta,,{},{v}", p + 1)?;
            }
        }
    }
    w.flush()?;
    println!("evaluate: v_measure {v:.6} -> {}", args.out.display());
    Ok(())
}
