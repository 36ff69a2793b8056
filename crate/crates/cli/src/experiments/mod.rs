//! Experiment drivers behind the CLI subcommands. Each driver returns its
//! rows in memory and has a `write` step that emits the files.

pub mod cim;
pub mod cost;
pub mod ood;
pub mod uci;

use rayon::ThreadPoolBuilder;
use tinyde_core::training::train_two_phase;
use tinyde_core::{Dataset, Mode, TinyDeModel, TrainConfig, TrainLog};

use crate::error::{CliError, CliResult};

/// Independent stream seed derived from a base seed and a stream tag
/// (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `f` over `items` on a pool of `jobs` threads and returns the results
/// in input order, whatever order they finish in.
pub fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> CliResult<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> CliResult<R> + Sync + Send,
{
    use rayon::prelude::*;
    let pool = ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Two-phase training for sequential models, single-shot for parallel ones.
pub fn train(
    model: &mut TinyDeModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> CliResult<Vec<TrainLog>> {
    Ok(match model.mode() {
        Mode::Sequential => train_two_phase(model, data, cfg)?,
        Mode::Parallel => vec![tinyde_core::training::train_single_shot(model, data, cfg)?],
    })
}

/// Sample mean and standard error (`None` for fewer than two values).
pub fn mean_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}
