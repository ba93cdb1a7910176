//! `zimclust simulate`: write scenario replicates (counts, optional size
//! factors and covariates, truth sidecars) to a directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use zimclust_core::{preset, simulate_replicate, write_dense_csv, SimConfig, SimDataset};

use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::report::{ParamsDto, TruthFile};
use crate::SimulateArgs;

pub fn run(args: &SimulateArgs) -> Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("simulate", args.seed.unwrap_or(0));

    let mut config: SimConfig = match (&args.scenario, &args.config) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("--scenario conflicts with --config".into()))
        }
        (Some(name), None) => {
            let case = args
                .case
                .ok_or_else(|| CliError::Usage("--scenario requires --case".into()))?;
            preset(name, case).map_err(|e| CliError::Usage(e.to_string()))?
        }
        (None, Some(path)) => {
            manifest.add_input("config", path)?;
            let file = File::open(path)?;
            serde_json::from_reader(std::io::BufReader::new(file))?
        }
        (None, None) => {
            return Err(CliError::Usage(
                "one of --scenario or --config is required".into(),
            ))
        }
    };
    if args.scenario.is_none() && args.case.is_some() {
        return Err(CliError::Usage("--case only applies to --scenario".into()));
    }
    if let Some(reps) = args.replicates {
        config.replicates = reps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    manifest.seed = config.seed;
    config.validate().map_err(CliError::from)?;

    std::fs::create_dir_all(&args.out)?;
    for rep in 0..config.replicates {
        let dataset = simulate_replicate(&config, rep)?;
        write_replicate(
            &args.out,
            &config,
            args.scenario.as_deref(),
            args.case,
            rep,
            &dataset,
        )?;
    }

    manifest.duration_seconds = started.elapsed().as_secs_f64();
    let mut w = BufWriter::new(File::create(args.out.join("manifest.json"))?);
    serde_json::to_writer_pretty(
        &mut w,
        &serde_json::json!({
            "manifest": manifest,
            "config": config,
        }),
    )?;
    w.write_all(b"\n")?;
    w.flush()?;
    println!(
        "simulate: wrote {} replicate(s) to {}",
        config.replicates,
        args.out.display()
    );
    Ok(())
}

fn write_replicate(
    dir: &Path,
    config: &SimConfig,
    scenario: Option<&str>,
    case: Option<usize>,
    rep: usize,
    dataset: &SimDataset,
) -> Result<()> {
    let tag = format!("rep{:03}", rep + 1);
    write_dense_csv(&dataset.counts, dir.join(format!("counts_{tag}.csv")))?;
    if let Some(sf) = &dataset.size_factors {
        let mut w = BufWriter::new(File::create(dir.join(format!("size_factors_{tag}.csv")))?);
        writeln!(w, "cell_id,size_factor")?;
        for (id, v) in dataset.counts.cell_ids().iter().zip(sf.values()) {
            writeln!(w, "{id},{v}")?;
        }
        w.flush()?;
    }
    if let Some(x) = &dataset.covariates {
        let mut w = BufWriter::new(File::create(dir.join(format!("covariates_{tag}.csv")))?);
        writeln!(w, "cell_id,{}", x.names().join(","))?;
        for (i, id) in dataset.counts.cell_ids().iter().enumerate() {
            let vals: Vec<String> = x.values().row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{id},{}", vals.join(","))?;
        }
        w.flush()?;
    }
    let truth = TruthFile {
        scenario: scenario.map(str::to_string),
        case,
        replicate: rep,
        seed: config.seed,
        labels: dataset.truth.labels.iter().map(|&l| l + 1).collect(),
        params: ParamsDto::from_params(&dataset.truth.params),
        always_zero: dataset
            .truth
            .always_zero
            .indexed_iter()
            .filter(|&(_, &m)| m)
            .map(|((i, j), _)| (i, j))
            .collect(),
    };
    crate::fit::write_json(&dir.join(format!("truth_{tag}.json")), &truth)?;
    Ok(())
}
