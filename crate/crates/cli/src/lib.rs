//! Experiment drivers for the `tinyde` binary: regression benchmarks,
//! out-of-distribution study, cost census and compute-in-memory fidelity.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod registry;

use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, TaskId};
pub use error::{CliError, CliResult};
use tinyde_core::data::manifest;

/// Environment variable consulted when neither flag nor config names a
/// data directory.
pub const DATA_DIR_ENV: &str = "TINYDE_DATA_DIR";

/// Flag, then config, then `TINYDE_DATA_DIR`, then `data/uci`.
pub fn resolve_data_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| cfg.data_dir.clone())
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data/uci"))
}

/// Validates `cfg`, runs `task`, and writes results plus `manifest.json`
/// into `out`. Returns the written paths, manifest last.
pub fn execute(
    task: TaskId,
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out: &Path,
    command: &str,
) -> CliResult<Vec<PathBuf>> {
    use experiments::{cim, cost, ood, uci};
    cfg.validate(task)?;
    let mut data_paths = Vec::new();
    let mut files = match task {
        TaskId::UciRegression => {
            let outcome = uci::run(cfg, data_dir)?;
            data_paths = outcome.data_paths.clone();
            uci::write(&outcome, out)?
        }
        TaskId::OodClassification => ood::write(&ood::run(cfg)?, out)?,
        TaskId::CostCensus => cost::write(&cost::run(cfg)?, out)?,
        TaskId::CimStudy => {
            let (outcome, path) = cim::run(cfg, data_dir)?;
            data_paths.push(path);
            cim::write(&outcome, cfg.cim.trace, out)?
        }
    };
    let mut datasets = Vec::new();
    for p in &data_paths {
        let entry = registry::UCI.iter().find(|d| p.ends_with(d.file));
        let ds = match entry {
            Some(e) => e.load(data_dir)?,
            None => continue,
        };
        datasets.push(manifest(p, &ds)?);
    }
    let mut resolved = cfg.clone();
    resolved.task = Some(task);
    resolved.out = Some(out.to_path_buf());
    resolved.data_dir = Some(data_dir.to_path_buf());
    let m = output::Manifest {
        tool: "tinyde",
        version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        seed: cfg.seed,
        config: &resolved,
        datasets,
        outputs: files
            .iter()
            .map(|f| {
                f.file_name()
                    .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
            })
            .collect(),
    };
    files.push(output::write_manifest(out, &m)?);
    Ok(files)
}
