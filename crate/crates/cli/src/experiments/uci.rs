//! Regression benchmarks: per-fold training and evaluation, aggregated into
//! a table with the reference columns alongside.

use std::path::{Path, PathBuf};

use serde::Serialize;
use tinyde_core::data::{make_folds, standardize, Fold};
use tinyde_core::uncertainty::{regression_nll, MIN_VAR};
use tinyde_core::{Dataset, Mode, ModelSpec, Task, Tensor, TinyDeModel};

use super::{derive_seed, mean_stderr, par_map, train};
use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::output;
use crate::registry::{self, UciDataset};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub dataset: String,
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub rmse: f64,
    pub nll: f64,
    /// Single-model ablation; NaN when disabled. Its NLL is always NaN since
    /// one member has no spread.
    pub rmse_m1: f64,
    pub nll_m1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub dataset: String,
    pub n: usize,
    pub q: usize,
    pub folds: usize,
    pub members: usize,
    pub rmse_mean: f64,
    pub rmse_stderr: Option<f64>,
    pub nll_mean: f64,
    pub nll_stderr: Option<f64>,
    pub rmse_m1_mean: f64,
    pub rmse_m1_stderr: Option<f64>,
    pub ref_rmse_mean: f64,
    pub ref_rmse_stderr: Option<f64>,
    pub ref_nll_mean: f64,
    pub ref_nll_stderr: Option<f64>,
    pub rmse_band_lo: Option<f64>,
    pub rmse_band_hi: Option<f64>,
    pub within_band: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UciOutcome {
    pub folds: Vec<FoldResult>,
    pub summaries: Vec<DatasetSummary>,
    pub data_paths: Vec<PathBuf>,
}

fn rmse(pred: &Tensor, target: &Tensor) -> f64 {
    let se: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    (se / pred.len() as f64).sqrt()
}

fn hidden(entry: &UciDataset, cfg: &ExperimentConfig) -> Vec<usize> {
    vec![cfg.uci.hidden_width.unwrap_or(entry.hidden_width); cfg.uci.hidden_layers]
}

/// Trains an ensemble of `members` on the fold and returns test RMSE in
/// original units and test NLL (NaN for one member).
fn evaluate(
    entry: &UciDataset,
    data: &Dataset,
    fold: &Fold,
    members: usize,
    seed: u64,
    cfg: &ExperimentConfig,
) -> CliResult<(f64, f64)> {
    let (train_set, test_set, scaler) =
        standardize(&data.subset(&fold.train)?, &data.subset(&fold.test)?);
    let spec = ModelSpec::mlp(
        data.n_features(),
        &hidden(entry, cfg),
        1,
        members,
        Task::Regression,
    );
    let mut model = TinyDeModel::new(spec, seed)?;
    if cfg.uci.mode == Mode::Parallel {
        model = model.to_parallel()?;
    }
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    train(&mut model, &train_set, &tc)?;
    let pred = model.predict(&test_set.x)?;
    let original = data.subset(&fold.test)?.y;
    let rmse = rmse(&scaler.destandardize_target(&pred.mean), &original);
    let nll = if members >= 2 {
        regression_nll(&pred.samples, &test_set.y, MIN_VAR, scaler.y_std[0])?.mean
    } else {
        f64::NAN
    };
    Ok((rmse, nll))
}

/// All folds of one dataset; folds run on `cfg.jobs` threads.
pub fn run_dataset(
    entry: &UciDataset,
    data: &Dataset,
    cfg: &ExperimentConfig,
) -> CliResult<Vec<FoldResult>> {
    let n_folds = cfg.uci.folds.unwrap_or_else(|| entry.folds());
    let base = derive_seed(
        cfg.seed,
        entry
            .id
            .bytes()
            .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64)),
    );
    let folds = make_folds(data.len(), n_folds, base)?;
    let indexed: Vec<(usize, &Fold)> = folds.iter().enumerate().collect();
    par_map(cfg.jobs, &indexed, |&(i, fold)| {
        let seed = derive_seed(base, i as u64 + 1);
        let (rmse, nll) = evaluate(entry, data, fold, cfg.uci.members, seed, cfg)?;
        let (rmse_m1, nll_m1) = if cfg.uci.ablation {
            evaluate(entry, data, fold, 1, seed, cfg)?
        } else {
            (f64::NAN, f64::NAN)
        };
        Ok(FoldResult {
            dataset: entry.id.to_string(),
            fold: i,
            n_train: fold.train.len(),
            n_test: fold.test.len(),
            rmse,
            nll,
            rmse_m1,
            nll_m1,
        })
    })
}

pub fn summarize(
    entry: &UciDataset,
    n: usize,
    folds: &[FoldResult],
    members: usize,
) -> DatasetSummary {
    let col = |f: fn(&FoldResult) -> f64| folds.iter().map(f).collect::<Vec<_>>();
    let (rmse_mean, rmse_stderr) = mean_stderr(&col(|r| r.rmse));
    let (nll_mean, nll_stderr) = mean_stderr(&col(|r| r.nll));
    let (rmse_m1_mean, rmse_m1_stderr) = mean_stderr(&col(|r| r.rmse_m1));
    let band = entry.rmse.band();
    DatasetSummary {
        dataset: entry.id.to_string(),
        n,
        q: entry.q,
        folds: folds.len(),
        members,
        rmse_mean,
        rmse_stderr,
        nll_mean,
        nll_stderr,
        rmse_m1_mean,
        rmse_m1_stderr,
        ref_rmse_mean: entry.rmse.mean,
        ref_rmse_stderr: entry.rmse.stderr,
        ref_nll_mean: entry.nll.mean,
        ref_nll_stderr: entry.nll.stderr,
        rmse_band_lo: band.map(|b| b.0),
        rmse_band_hi: band.map(|b| b.1),
        within_band: band.map(|(lo, hi)| rmse_mean >= lo && rmse_mean <= hi),
    }
}

/// Runs every configured dataset. Missing files fail before any training.
pub fn run(cfg: &ExperimentConfig, data_dir: &Path) -> CliResult<UciOutcome> {
    let mut loaded = Vec::new();
    for id in &cfg.uci.datasets {
        let entry = registry::lookup(id)?;
        loaded.push((entry, entry.load(data_dir)?, entry.path(data_dir)));
    }
    let mut out = UciOutcome {
        folds: Vec::new(),
        summaries: Vec::new(),
        data_paths: Vec::new(),
    };
    for (entry, data, path) in loaded {
        let folds = run_dataset(entry, &data, cfg)?;
        out.summaries
            .push(summarize(entry, data.len(), &folds, cfg.uci.members));
        out.folds.extend(folds);
        out.data_paths.push(path);
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v:.2}"))
}

/// Writes `uci_folds.csv`, `uci_results.csv` and `summary.txt`.
pub fn write(outcome: &UciOutcome, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let folds = output::write_csv_rows(&dir.join("uci_folds.csv"), &outcome.folds)?;
    let results = output::write_csv_rows(&dir.join("uci_results.csv"), &outcome.summaries)?;
    let mut lines = vec![format!(
        "{:<22} {:>5} {:>18} {:>18} {:>14} {:>18} {:>7}",
        "dataset", "folds", "RMSE", "NLL", "RMSE (M=1)", "reference RMSE", "in band"
    )];
    for s in &outcome.summaries {
        lines.push(format!(
            "{:<22} {:>5} {:>18} {:>18} {:>14} {:>18} {:>7}",
            s.dataset,
            s.folds,
            format!("{:.2} ± {}", s.rmse_mean, fmt_opt(s.rmse_stderr)),
            format!("{:.2} ± {}", s.nll_mean, fmt_opt(s.nll_stderr)),
            format!("{:.2}", s.rmse_m1_mean),
            format!("{:.2} ± {}", s.ref_rmse_mean, fmt_opt(s.ref_rmse_stderr)),
            s.within_band.map_or("NA", |b| if b { "yes" } else { "no" }),
        ));
    }
    let summary = output::write_summary(&dir.join("summary.txt"), &lines)?;
    Ok(vec![folds, results, summary])
}
