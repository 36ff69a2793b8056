//! Analytic cost census across methods and ensemble sizes.

use std::path::{Path, PathBuf};

use tinyde_core::cost::{emit_cost_curves, write_cost_csv};
use tinyde_core::{CostCensus, LayerSpec};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output;

/// Width of the bundled regression MLP spec: 13 inputs, two hidden layers of 50.
const UCI_MLP: [u64; 4] = [13, 50, 50, 1];

pub fn resolve_spec(name: &str) -> CliResult<LayerSpec> {
    match name {
        "resnet32" => Ok(LayerSpec::resnet32()),
        "uci-mlp" => Ok(LayerSpec::mlp(&UCI_MLP, true)),
        path => {
            let p = Path::new(path);
            if !p.is_file() {
                return Err(CliError::Config(format!(
                    "cost.spec `{path}` is neither `resnet32`, `uci-mlp` nor an existing spec file"
                )));
            }
            LayerSpec::from_path(p).map_err(|e| CliError::Config(e.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostOutcome {
    pub spec: LayerSpec,
    pub rows: Vec<CostCensus>,
}

pub fn run(cfg: &ExperimentConfig) -> CliResult<CostOutcome> {
    let spec = resolve_spec(&cfg.cost.spec)?;
    let rows = emit_cost_curves(&spec, &cfg.cost.members)?;
    Ok(CostOutcome { spec, rows })
}

fn pct(numer: u64, denom: u64) -> f64 {
    100.0 * numer as f64 / denom as f64
}

/// Writes `cost_curves.csv` and `summary.txt`.
pub fn write(outcome: &CostOutcome, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let path = dir.join("cost_curves.csv");
    write_cost_csv(&outcome.rows, output::create(&path)?)?;
    let s = &outcome.spec;
    let (share, branch) = (s.norm_share(), s.branch_fraction());
    let lines = vec![
        format!("spec                     {}", s.name),
        format!("weight parameters        {}", s.weight_params()),
        format!("learnable norm params    {}", s.norm_learnable()),
        format!("norm running buffers     {}", s.norm_buffers()),
        format!(
            "norm share of learnable  {:.3}%",
            pct(*share.numer(), *share.denom())
        ),
        format!(
            "branch share of storage  {:.3}%",
            pct(*branch.numer(), *branch.denom())
        ),
        format!("MACs per pass            {}", s.macs()),
    ];
    let summary = output::write_summary(&dir.join("summary.txt"), &lines)?;
    Ok(vec![path, summary])
}
