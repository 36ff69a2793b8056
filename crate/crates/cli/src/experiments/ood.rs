//! Out-of-distribution study on the synthetic blobs: entropy and
//! disagreement on in-distribution, noise-corrupted and feature-permuted
//! test sets for several ensemble sizes.

use std::path::{Path, PathBuf};

use serde::Serialize;
use tinyde_core::data::{
    corrupt_gaussian, corrupt_permute_features, synth_classification, BLOB_FEATURES,
};
use tinyde_core::uncertainty::{max_disagreement, predictive_entropy, Histogram};
use tinyde_core::{Mode, ModelSpec, Task, Tensor, TinyDeModel};

use super::{derive_seed, par_map, train};
use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::output;

pub const SETS: [&str; 3] = ["id", "gaussian", "permuted"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodSummary {
    pub members: usize,
    pub set: &'static str,
    pub mean_entropy: f64,
    pub mean_disagreement: f64,
    pub accuracy: f64,
    /// `(mean - id_mean) / id_mean`; empty when the ID mean is zero.
    pub entropy_rel_change: Option<f64>,
    pub disagreement_rel_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub members: usize,
    pub set: &'static str,
    pub metric: &'static str,
    pub bin: usize,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodOutcome {
    pub summary: Vec<OodSummary>,
    pub histograms: Vec<HistogramRow>,
}

impl OodOutcome {
    pub fn row(&self, members: usize, set: &str) -> Option<&OodSummary> {
        self.summary
            .iter()
            .find(|r| r.members == members && r.set == set)
    }
}

fn mean(t: &Tensor) -> f64 {
    t.sum() / t.len() as f64
}

fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = probs.row(i);
            row.iter().enumerate().all(|(k, &p)| k == l || p < row[l])
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn rel(v: f64, id: f64) -> Option<f64> {
    (id != 0.0).then(|| (v - id) / id)
}

/// Trains one model per ensemble size on the same data (so the `M = 1` model
/// is the first member of every larger ensemble) and scores all test sets.
pub fn run(cfg: &ExperimentConfig) -> CliResult<OodOutcome> {
    let o = &cfg.ood;
    let train_set = synth_classification(o.train_size, derive_seed(cfg.seed, 1));
    let test = synth_classification(o.test_size, derive_seed(cfg.seed, 2));
    let labels = test.labels()?;
    let inputs = [
        test.x.clone(),
        corrupt_gaussian(&test.x, o.sigma_scale, derive_seed(cfg.seed, 3))?,
        corrupt_permute_features(&test.x, derive_seed(cfg.seed, 4))?,
    ];
    let model_seed = derive_seed(cfg.seed, 5);
    let per_size = par_map(cfg.jobs, &o.members, |&members| {
        let spec = ModelSpec::mlp(BLOB_FEATURES, &o.hidden, 2, members, Task::Classification);
        let mut model = TinyDeModel::new(spec, model_seed)?;
        if o.mode == Mode::Parallel {
            model = model.to_parallel()?;
        }
        let mut tc = cfg.train.clone();
        tc.seed = model_seed;
        train(&mut model, &train_set, &tc)?;
        let mut summary = Vec::new();
        let mut histograms = Vec::new();
        let mut id = (0.0, 0.0);
        for (set, x) in SETS.iter().zip(&inputs) {
            let pred = model.predict(x)?;
            let entropy = predictive_entropy(&pred.samples)?;
            let disagreement = max_disagreement(&pred.samples)?.per_sample;
            let (h, d) = (mean(&entropy), mean(&disagreement));
            if *set == "id" {
                id = (h, d);
            }
            summary.push(OodSummary {
                members,
                set,
                mean_entropy: h,
                mean_disagreement: d,
                accuracy: accuracy(&pred.mean, &labels),
                entropy_rel_change: rel(h, id.0),
                disagreement_rel_change: rel(d, id.1),
            });
            for (metric, values, hi) in [
                ("entropy", &entropy, 2f64.ln()),
                ("max_disagreement", &disagreement, 1.0),
            ] {
                let hist = Histogram::new(values.data(), 0.0, hi, o.bins)?;
                histograms.extend(hist.counts.iter().enumerate().map(|(bin, &count)| {
                    HistogramRow {
                        members,
                        set,
                        metric,
                        bin,
                        bin_lo: hist.edges[bin],
                        bin_hi: hist.edges[bin + 1],
                        count,
                    }
                }));
            }
        }
        Ok((summary, histograms))
    })?;
    let (summary, histograms) =
        per_size
            .into_iter()
            .fold((Vec::new(), Vec::new()), |mut acc, (s, h)| {
                acc.0.extend(s);
                acc.1.extend(h);
                acc
            });
    Ok(OodOutcome {
        summary,
        histograms,
    })
}

fn fmt_rel(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{:+.1}%", 100.0 * v))
}

/// Writes `ood_summary.csv`, `ood_histograms.csv` and `summary.txt`.
pub fn write(outcome: &OodOutcome, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let summary = output::write_csv_rows(&dir.join("ood_summary.csv"), &outcome.summary)?;
    let hist = output::write_csv_rows(&dir.join("ood_histograms.csv"), &outcome.histograms)?;
    let mut lines = vec![format!(
        "{:>7} {:<9} {:>9} {:>9} {:>12} {:>9} {:>12}",
        "members", "set", "accuracy", "entropy", "vs id", "max dis.", "vs id"
    )];
    for r in &outcome.summary {
        lines.push(format!(
            "{:>7} {:<9} {:>9.3} {:>9.4} {:>12} {:>9.4} {:>12}",
            r.members,
            r.set,
            r.accuracy,
            r.mean_entropy,
            fmt_rel(r.entropy_rel_change),
            r.mean_disagreement,
            fmt_rel(r.disagreement_rel_change)
        ));
    }
    let text = output::write_summary(&dir.join("summary.txt"), &lines)?;
    Ok(vec![summary, hist, text])
}
