//! `zimclust fit`: ingestion, optional gene filtering, multi-restart model
//! fitting with K selection, and the JSON report plus CSV side tables.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};

use zimclust_core::{
    aic, bic, compute_size_factors, filter_genes_iqr, load_counts, select_top_sd, CountFormat,
    CountMatrix, CovariateMatrix, EmData, InitMethod, RestartPlan, SizeFactors, Variant,
};

use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::report::{selection_dto, FilterDto, FitDto, FitReport, ParamsDto};
use crate::{FitArgs, InitChoice, ModelChoice};

impl ModelChoice {
    pub fn variant(self) -> Variant {
        match self {
            ModelChoice::Zip => Variant::Zip,
            ModelChoice::ZipSf | ModelChoice::ZipCov => Variant::ZipReg,
            ModelChoice::Zinb => Variant::Zinb,
            ModelChoice::ZinbSf | ModelChoice::ZinbCov => Variant::ZinbReg,
        }
    }

    fn requires_size_factors(self) -> bool {
        matches!(self, ModelChoice::ZipSf | ModelChoice::ZinbSf)
    }

    fn requires_covariates(self) -> bool {
        matches!(self, ModelChoice::ZipCov | ModelChoice::ZinbCov)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Zip => "zip",
            ModelChoice::ZipSf => "zip-sf",
            ModelChoice::ZipCov => "zip-cov",
            ModelChoice::Zinb => "zinb",
            ModelChoice::ZinbSf => "zinb-sf",
            ModelChoice::ZinbCov => "zinb-cov",
        }
    }
}

/// `.mtx` means Matrix Market triplet, anything else dense CSV.
pub fn detect_format(path: &Path) -> CountFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("mtx") => CountFormat::MatrixMarketTriplet,
        _ => CountFormat::DenseCsv,
    }
}

fn parse_k_range(spec: &str) -> Result<Vec<usize>> {
    let (a, b) = spec
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("--k-range must be A:B, got '{spec}'")))?;
    let lo: usize = a
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("bad k-range start '{a}'")))?;
    let hi: usize = b
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("bad k-range end '{b}'")))?;
    if lo == 0 || hi < lo {
        return Err(CliError::Usage(format!(
            "--k-range needs 1 <= A <= B, got {lo}:{hi}"
        )));
    }
    Ok((lo..=hi).collect())
}

/// Read a `cell_id,size_factor` CSV whose rows ids must match the counts.
fn read_size_factors(path: &Path, counts: &CountMatrix) -> Result<SizeFactors> {
    let file = File::open(path)?;
    let mut values = Vec::new();
    let mut ids = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue; // header
        }
        let (id, v) = line.split_once(',').ok_or_else(|| {
            CliError::Data(format!(
                "{}:{}: expected two columns",
                path.display(),
                i + 1
            ))
        })?;
        ids.push(id.trim().to_string());
        values.push(v.trim().parse::<f64>().map_err(|_| {
            CliError::Data(format!(
                "{}:{}: unreadable size factor '{v}'",
                path.display(),
                i + 1
            ))
        })?);
    }
    if ids != counts.cell_ids() {
        return Err(CliError::Data(format!(
            "{}: cell ids do not match the count matrix",
            path.display()
        )));
    }
    Ok(SizeFactors::new(Array1::from_vec(values))?)
}

/// Read a `cell_id,<name>...` covariate CSV aligned with the counts.
fn read_covariates(path: &Path, counts: &CountMatrix) -> Result<CovariateMatrix> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Data(format!("{}: empty file", path.display())))??;
    let names: Vec<String> = header
        .split(',')
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    if names.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no covariate columns",
            path.display()
        )));
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split(',');
        ids.push(toks.next().unwrap_or_default().trim().to_string());
        let before = values.len();
        for tok in toks {
            values.push(tok.trim().parse::<f64>().map_err(|_| {
                CliError::Data(format!(
                    "{}:{}: unreadable covariate '{tok}'",
                    path.display(),
                    i + 2
                ))
            })?);
        }
        if values.len() - before != names.len() {
            return Err(CliError::Data(format!(
                "{}:{}: expected {} covariates",
                path.display(),
                i + 2,
                names.len()
            )));
        }
    }
    if ids != counts.cell_ids() {
        return Err(CliError::Data(format!(
            "{}: cell ids do not match the count matrix",
            path.display()
        )));
    }
    let m = Array2::from_shape_vec((ids.len(), names.len()), values)
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(CovariateMatrix::new(m, names)?)
}

pub fn run(args: &FitArgs) -> Result<()> {
    let started = Instant::now();
    let k_values = match (args.k, &args.k_range) {
        (Some(_), Some(_)) => return Err(CliError::Usage("--k conflicts with --k-range".into())),
        (Some(k), None) => {
            if k == 0 {
                return Err(CliError::Usage("--k must be >= 1".into()));
            }
            vec![k]
        }
        (None, Some(spec)) => parse_k_range(spec)?,
        (None, None) => {
            return Err(CliError::Usage(
                "one of --k or --k-range is required".into(),
            ))
        }
    };
    if args.model.requires_size_factors() && args.size_factors.is_none() {
        return Err(CliError::Usage(format!(
            "model {} requires --size-factors (compute or a file)",
            args.model.name()
        )));
    }
    if args.model.requires_covariates() && args.covariates.is_none() {
        return Err(CliError::Usage(format!(
            "model {} requires --covariates",
            args.model.name()
        )));
    }
    if !args.model.requires_covariates() && args.covariates.is_some() {
        return Err(CliError::Usage(format!(
            "model {} does not take covariates",
            args.model.name()
        )));
    }

    let mut manifest = RunManifest::new("fit", args.seed);
    manifest.add_input("counts", &args.counts)?;

    let raw = load_counts(&args.counts, detect_format(&args.counts))?;

    // Size factors come from the pre-filtering matrix.
    let size_factors = match args.size_factors.as_deref() {
        None => None,
        Some("compute") => Some(compute_size_factors(&raw)?),
        Some(path) => {
            let path = Path::new(path);
            manifest.add_input("size_factors", path)?;
            Some(read_size_factors(path, &raw)?)
        }
    };

    let genes_before = raw.n_genes();
    let mut matrix = raw;
    if let Some(threshold) = args.filter_iqr {
        let (filtered, _) = filter_genes_iqr(&matrix, threshold)?;
        matrix = filtered;
    }
    if let Some(n_top) = args.top_sd {
        let (filtered, _) = select_top_sd(&matrix, n_top)?;
        matrix = filtered;
    }
    let filter = (args.filter_iqr.is_some() || args.top_sd.is_some()).then(|| FilterDto {
        iqr_threshold: args.filter_iqr,
        top_sd: args.top_sd,
        genes_before,
        genes_after: matrix.n_genes(),
    });

    let covariates = match &args.covariates {
        None => None,
        Some(path) => {
            manifest.add_input("covariates", path)?;
            Some(read_covariates(path, &matrix)?)
        }
    };

    let mut data = EmData::new(&matrix);
    if let Some(sf) = &size_factors {
        data = data.with_size_factors(sf);
    }
    if let Some(x) = &covariates {
        data = data.with_covariates(x);
    }

    let init_methods = match args.init {
        InitChoice::Kmeans => vec![InitMethod::Kmeans],
        InitChoice::Random => vec![InitMethod::Random],
        InitChoice::Both => vec![InitMethod::Kmeans, InitMethod::Random],
    };
    let plan = RestartPlan {
        variant: args.model.variant(),
        k_values: k_values.clone(),
        restarts: args.restarts,
        init_methods: init_methods.clone(),
        base_seed: args.seed,
        tol: args.tol,
        max_iter: args.max_iter,
    };
    let selection = zimclust_core::run_selection(&data, &plan)?;
    let chosen = selection.chosen_fit();

    manifest.duration_seconds = started.elapsed().as_secs_f64();
    let report = FitReport {
        schema_version: 1,
        manifest,
        model: args.model.name().to_string(),
        k_values,
        init_methods: init_methods.iter().map(|m| m.to_string()).collect(),
        restarts: args.restarts,
        tol: args.tol,
        max_iter: args.max_iter,
        n_cells: matrix.n_cells(),
        n_genes: matrix.n_genes(),
        cell_ids: matrix.cell_ids().to_vec(),
        gene_ids: matrix.gene_ids().to_vec(),
        filter,
        selection: selection_dto(&selection),
        fit: FitDto {
            params: ParamsDto::from_params(&chosen.params),
            loglik: chosen.loglik(),
            aic: aic(chosen)?,
            bic: bic(chosen)?,
            converged: chosen.converged,
            n_iter: chosen.n_iter,
            loglik_trace: chosen.loglik_trace.clone(),
            labels: chosen.labels.iter().map(|&l| l + 1).collect(),
        },
    };

    write_json(&args.out, &report)?;
    write_labels_csv(&sibling(&args.out, "labels.csv"), &report)?;
    write_responsibilities_csv(
        &sibling(&args.out, "responsibilities.csv"),
        &report.cell_ids,
        &chosen.z_hat,
    )?;
    println!(
        "fit: model {} chose K = {} ({} init), AIC {:.4} -> {}",
        report.model,
        report.selection.chosen.k,
        report.selection.chosen.init,
        report.selection.chosen.aic,
        args.out.display()
    );
    Ok(())
}

pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    out.with_file_name(format!("{stem}.{suffix}"))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_labels_csv(path: &Path, report: &FitReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "cell_id,label")?;
    for (id, label) in report.cell_ids.iter().zip(&report.fit.labels) {
        writeln!(w, "{id},{label}")?;
    }
    w.flush()?;
    Ok(())
}

fn write_responsibilities_csv(path: &Path, cell_ids: &[String], z: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let k = z.ncols();
    let header: Vec<String> = (1..=k).map(|j| format!("z_{j}")).collect();
    writeln!(w, "cell_id,{}", header.join(","))?;
    for (id, row) in cell_ids.iter().zip(z.rows()) {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
        writeln!(w, "{id},{}", vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}
