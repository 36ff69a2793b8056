//! Compute-in-memory fidelity: a trained regression ensemble run through the
//! sequential simulator at several converter precisions.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tinyde_core::cim::{run_sequential_inference, CimRun, Precision, QuantSpec};
use tinyde_core::data::{make_folds, standardize, Standardizer};
use tinyde_core::tensor::Reduction;
use tinyde_core::{Dataset, ModelSpec, Phase, Task, Tensor, TinyDeModel};

use super::{derive_seed, train};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output;
use crate::registry;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityRow {
    /// Empty for the full-precision run.
    pub bits: Option<u32>,
    /// Mean and max absolute member-output error against exact inference.
    pub mae: f64,
    pub max_abs_err: f64,
    /// Test RMSE of the ensemble mean in original units.
    pub rmse: f64,
    pub rmse_rel_change: f64,
}

#[derive(Debug, Clone)]
pub struct CimOutcome {
    pub model: TinyDeModel,
    pub exact_rmse: f64,
    pub rows: Vec<FidelityRow>,
    /// Routing log of the full-precision run.
    pub ideal_run: CimRun,
}

/// Everything the study needs from one split of a benchmark.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub scaler: Standardizer,
    pub test_y: Tensor,
}

pub fn prepare(data: &Dataset, seed: u64) -> CliResult<Prepared> {
    let fold = make_folds(data.len(), 1, seed)?.remove(0);
    let test_raw = data.subset(&fold.test)?;
    let (train, test, scaler) = standardize(&data.subset(&fold.train)?, &test_raw);
    Ok(Prepared {
        train,
        test,
        scaler,
        test_y: test_raw.y,
    })
}

fn rmse_of_members(outputs: &Tensor, p: &Prepared) -> CliResult<f64> {
    let mean = p
        .scaler
        .destandardize_target(&outputs.reduce(&[0], Reduction::Mean)?);
    let se: f64 = mean
        .data()
        .iter()
        .zip(p.test_y.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((se / mean.len() as f64).sqrt())
}

/// Fidelity of an already trained sequential model on `p.test`, with clip
/// ranges calibrated on `p.train`.
pub fn study(
    model: &TinyDeModel,
    p: &Prepared,
    bits: &[u32],
    quantile: f64,
) -> CliResult<(f64, Vec<FidelityRow>, CimRun)> {
    let exact = model
        .clone()
        .forward_all_sequential(&p.test.x, Phase::Eval)?;
    let exact_rmse = rmse_of_members(&exact, p)?;
    let base = QuantSpec::calibrate(
        model,
        &p.train.x,
        Precision::Ideal,
        Precision::Ideal,
        quantile,
    )?;
    let row = |b: Option<u32>, run: &CimRun| -> CliResult<FidelityRow> {
        let errs: Vec<f64> = run
            .outputs
            .data()
            .iter()
            .zip(exact.data())
            .map(|(a, e)| (a - e).abs())
            .collect();
        let rmse = rmse_of_members(&run.outputs, p)?;
        Ok(FidelityRow {
            bits: b,
            mae: errs.iter().sum::<f64>() / errs.len() as f64,
            max_abs_err: errs.iter().copied().fold(0.0, f64::max),
            rmse,
            rmse_rel_change: (rmse - exact_rmse) / exact_rmse,
        })
    };
    let ideal_run = run_sequential_inference(model, &p.test.x, &base, None)?;
    let mut rows = vec![row(None, &ideal_run)?];
    for &b in bits {
        let q = base.with_bits(Precision::Bits(b), Precision::Bits(b));
        rows.push(row(
            Some(b),
            &run_sequential_inference(model, &p.test.x, &q, None)?,
        )?);
    }
    Ok((exact_rmse, rows, ideal_run))
}

pub fn run(cfg: &ExperimentConfig, data_dir: &Path) -> CliResult<(CimOutcome, PathBuf)> {
    let entry = registry::lookup(&cfg.cim.dataset)?;
    let data = entry.load(data_dir)?;
    let p = prepare(&data, derive_seed(cfg.seed, 1))?;
    let seed = derive_seed(cfg.seed, 2);
    let spec = ModelSpec::mlp(
        data.n_features(),
        &[entry.hidden_width; 2],
        1,
        cfg.cim.members,
        Task::Regression,
    );
    let mut model = TinyDeModel::new(spec, seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    train(&mut model, &p.train, &tc)?;
    let (exact_rmse, rows, ideal_run) = study(&model, &p, &cfg.cim.bits, cfg.cim.clip_quantile)?;
    Ok((
        CimOutcome {
            model,
            exact_rmse,
            rows,
            ideal_run,
        },
        entry.path(data_dir),
    ))
}

/// Writes `cim_fidelity.csv`, `summary.txt` and, when asked, `cim_trace.log`.
pub fn write(outcome: &CimOutcome, trace: bool, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files = vec![output::write_csv_rows(
        &dir.join("cim_fidelity.csv"),
        &outcome.rows,
    )?];
    let mut lines = vec![
        format!("exact-path test RMSE {:.4}", outcome.exact_rmse),
        format!(
            "{:>6} {:>12} {:>12} {:>10} {:>10}",
            "bits", "MAE", "max error", "RMSE", "vs exact"
        ),
    ];
    for r in &outcome.rows {
        lines.push(format!(
            "{:>6} {:>12.3e} {:>12.3e} {:>10.4} {:>9.2}%",
            r.bits
                .map_or_else(|| "ideal".to_string(), |b| b.to_string()),
            r.mae,
            r.max_abs_err,
            r.rmse,
            100.0 * r.rmse_rel_change
        ));
    }
    files.push(output::write_summary(&dir.join("summary.txt"), &lines)?);
    if trace {
        let path = dir.join("cim_trace.log");
        let mut w = output::create(&path)?;
        outcome.ideal_run.write_trace(&mut w)?;
        w.flush()
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        files.push(path);
    }
    Ok(files)
}
