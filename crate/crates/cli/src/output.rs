//! Result files: CSV tables, a fixed-width text summary and a JSON manifest
//! written beside them.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use tinyde_core::data::DatasetManifest;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::write(path, e)
}

pub fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| io_err(path, e))?,
    ))
}

/// One row per element, header from the field names.
pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<PathBuf> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

pub fn write_summary(path: &Path, lines: &[String]) -> CliResult<PathBuf> {
    let mut w = create(path)?;
    for l in lines {
        writeln!(w, "{}", l.trim_end()).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

/// Everything needed to rerun a command. No timestamps, so reruns produce
/// the same manifest.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: &'a ExperimentConfig,
    pub datasets: Vec<DatasetManifest>,
    pub outputs: Vec<String>,
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> CliResult<PathBuf> {
    let path = dir.join("manifest.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, manifest).map_err(|e| io_err(&path, e))?;
    writeln!(w).map_err(|e| io_err(&path, e))?;
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(path)
}
