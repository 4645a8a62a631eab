use std::fs;
use std::path::Path;

use metasim::modelspec::{self, ModelDocument};
use metasim::topology::Scenario;
use metasim::trajectory::{RunStats, Termination, TrajectoryMeta};
use metasim::{coordinator, SimulationConfig};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, RunArgs};

#[derive(Serialize)]
struct Replicate {
    index: u64,
    seed: u64,
    file: String,
    termination: Termination,
    stats: RunStats,
}

#[derive(Serialize)]
struct Manifest {
    source: String,
    model_file: String,
    model_hash: String,
    master_seed: u64,
    seeds: Vec<u64>,
    config: SimulationConfig,
    replicates: Vec<Replicate>,
}

fn load(args: &RunArgs) -> Result<(String, ModelDocument), CliError> {
    if let Some(id) = &args.scenario {
        let scenario: Scenario = id.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
        let doc = modelspec::emit_scenario(&scenario).map_err(|e| CliError::Usage(format!("{e}")))?;
        return Ok((scenario.to_string(), doc));
    }
    let path = args.model.as_deref().expect("clap requires a model or a scenario");
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    match modelspec::parse(&text) {
        Ok(doc) => Ok((path.display().to_string(), doc)),
        Err(diags) => {
            let lines: Vec<String> = diags.iter().map(|d| format!("{}:{d}", path.display())).collect();
            Err(CliError::Usage(format!(
                "{} error(s) in model file\n{}",
                diags.len(),
                lines.join("\n")
            )))
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let threads = match std::env::var("METASIM_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("METASIM_THREADS must be an integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))
}

pub fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let (source, doc) = load(args)?;
    let mut config = doc.config.apply(SimulationConfig::default());
    if let Some(v) = args.t_end {
        config.t_end = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.engine {
        config.engine = v;
    }
    if let Some(v) = args.epsilon {
        config.epsilon = v;
    }
    if let Some(v) = args.record_interval {
        config.record_interval = v;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if args.replicates == 0 {
        return Err(CliError::Usage("--replicates must be at least 1".into()));
    }
    let model = doc.to_model().map_err(|e| CliError::Usage(e.to_string()))?;
    if let Err(e) = model.ensure_valid() {
        return Err(CliError::Usage(e.to_string()));
    }

    let mut bare = doc.clone();
    bare.config = Default::default();
    let model_text = modelspec::serialize(&bare);
    let model_hash = hex::encode(Sha256::digest(model_text.as_bytes()));

    let out = &args.out;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let model_file = "model.mps";
    write(&out.join(model_file), model_text.as_bytes())?;

    let width = (args.replicates - 1).to_string().len().max(3);
    let seeds: Vec<u64> = (0..args.replicates).map(|k| config.seed.wrapping_add(k)).collect();
    let replicates = thread_pool()?.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(k, &seed)| {
                let cfg = SimulationConfig { seed, ..config.clone() };
                let mut traj = coordinator::run(model.clone(), cfg.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
                traj.meta = Some(TrajectoryMeta {
                    seed,
                    engine: cfg.engine.to_string(),
                    scenario: source.clone(),
                    config: cfg,
                });
                let file = format!("replicate_{k:0width$}.csv");
                write(&out.join(&file), traj.to_csv_string().as_bytes())?;
                Ok(Replicate {
                    index: k as u64,
                    seed,
                    file,
                    termination: traj.termination,
                    stats: traj.stats,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let manifest = Manifest {
        source,
        model_file: model_file.into(),
        model_hash,
        master_seed: config.seed,
        seeds,
        config,
        replicates,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out.join("manifest.json"), format!("{json}\n").as_bytes())?;
    eprintln!("wrote {} replicate(s) to {}", manifest.replicates.len(), out.display());
    Ok(())
}

pub fn cmd_emit(id: &str) -> Result<(), CliError> {
    let scenario: Scenario = id.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
    let doc = modelspec::emit_scenario(&scenario).map_err(|e| CliError::Usage(format!("{e}")))?;
    print!("{}", modelspec::serialize(&doc));
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
