//! Losses, optimizers and the training regimes.
//!
//! * [`train_full`]: every parameter, member 0's normalization active.
//! * [`train_member_norms`]: one member's normalization on a frozen trunk.
//! * [`train_two_phase`]: the two above chained over all members.
//! * [`train_single_shot`]: all members at once on tiled minibatches.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{labels_from, Dataset};
use crate::ensemble::{Mode, ModelGrads, ParamKey, Task, TinyDeModel};
use crate::error::{Error, Result};
use crate::layers::{NormKind, Phase};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Mean squared error over every entry.
pub fn loss_mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("mse", pred.shape(), target.shape()));
    }
    let n = pred.len().max(1) as f64;
    let diff = pred.sub(target)?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

/// Softmax cross-entropy averaged over the batch; `labels[i] < K`.
pub fn loss_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::dim(
            "cross_entropy",
            logits.shape(),
            &[labels.len(), 0],
        ));
    }
    let (b, k) = (logits.dim(0), logits.dim(1));
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Value(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut grad = logits.softmax_last_axis();
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + row.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        grad.row_mut(i)[label] -= 1.0;
    }
    let n = b.max(1) as f64;
    Ok((loss / n, grad.scale(1.0 / n)))
}

/// Gaussian negative log-likelihood averaged over every entry.
/// Returns `(loss, dmean, dlog_var)`.
pub fn loss_gaussian_nll(
    mean: &Tensor,
    log_var: &Tensor,
    target: &Tensor,
) -> Result<(f64, Tensor, Tensor)> {
    if mean.shape() != target.shape() || log_var.shape() != target.shape() {
        return Err(Error::dim("gaussian_nll", mean.shape(), target.shape()));
    }
    let n = mean.len().max(1) as f64;
    let mut dmean = Tensor::zeros(mean.shape());
    let mut dlv = Tensor::zeros(mean.shape());
    let mut loss = 0.0;
    for i in 0..mean.len() {
        let (mu, lv, t) = (mean.data()[i], log_var.data()[i], target.data()[i]);
        let inv = (-lv).exp();
        let r = t - mu;
        loss += 0.5 * (LN_2PI + lv + r * r * inv);
        dmean.data_mut()[i] = -r * inv / n;
        dlv.data_mut()[i] = 0.5 * (1.0 - r * r * inv) / n;
    }
    Ok((loss / n, dmean, dlv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
    /// Output columns `[mean | log_var]`.
    GaussianNll,
}

impl LossKind {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Regression => LossKind::Mse,
            Task::Classification => LossKind::CrossEntropy,
        }
    }

    /// Loss value and gradient w.r.t. the model output.
    pub fn evaluate(self, out: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            LossKind::Mse => loss_mse(out, target),
            LossKind::CrossEntropy => loss_cross_entropy(out, &labels_from(target)?),
            LossKind::GaussianNll => {
                let (b, c) = (out.dim(0), out.dim(1));
                if c % 2 != 0 || target.shape() != [b, c / 2] {
                    return Err(Error::dim(
                        "gaussian_nll output",
                        out.shape(),
                        &[b, 2 * target.dim(1)],
                    ));
                }
                let k = c / 2;
                let mut mean = Tensor::zeros(&[b, k]);
                let mut lv = Tensor::zeros(&[b, k]);
                for i in 0..b {
                    mean.row_mut(i).copy_from_slice(&out.row(i)[..k]);
                    lv.row_mut(i).copy_from_slice(&out.row(i)[k..]);
                }
                let (loss, dm, dl) = loss_gaussian_nll(&mean, &lv, target)?;
                let mut grad = Tensor::zeros(out.shape());
                for i in 0..b {
                    grad.row_mut(i)[..k].copy_from_slice(dm.row(i));
                    grad.row_mut(i)[k..].copy_from_slice(dl.row(i));
                }
                Ok((loss, grad))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Default::default()
        }
    }
}

/// Optimizer with per-tensor Adam moments keyed by parameter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    moments: BTreeMap<ParamKey, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update for every gradient present in `grads`.
    pub fn apply(&mut self, model: &mut TinyDeModel, grads: &ModelGrads) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step.min(i32::MAX as u64) as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (key, g) in grads.entries() {
            let p = model.param_mut(key)?;
            if p.shape() != g.shape() {
                return Err(Error::dim("optimizer update", p.shape(), g.shape()));
            }
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= c.learning_rate * d;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(key)
                        .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                    let iter = p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                        .zip(g.data());
                    for (((w, m), v), d) in iter {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * d;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * d * d;
                        *w -= c.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// `None` picks the task's natural loss.
    pub loss: Option<LossKind>,
    pub bootstrap: bool,
    /// One seed per member; missing entries are derived from `seed`.
    pub member_seeds: Vec<u64>,
    /// Also retrain member 0's normalization in phase two.
    pub retune_member0: bool,
    /// Standard deviation of the seeded `gamma`/`beta` noise given to members
    /// `1..M` before single-shot training. Without it identically initialized
    /// members receive identical gradients and never separate.
    pub init_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            loss: None,
            bootstrap: false,
            member_seeds: Vec::new(),
            retune_member0: false,
            init_jitter: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn member_seed(&self, m: usize) -> u64 {
        self.member_seeds
            .get(m)
            .copied()
            .unwrap_or_else(|| self.seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(m as u64 + 1))
    }

    fn validate(&self, model: &TinyDeModel, n: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) {
            return Err(Error::Config(
                "init_jitter must be a finite non-negative number".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let batch_stats = model.spec().norm_kind == NormKind::Batch && model.norm_param_count() > 0;
        if batch_stats && (self.batch_size < 2 || n < 2) {
            return Err(Error::Config(
                "batch-statistics normalization needs minibatches of at least 2 rows".into(),
            ));
        }
        if n == 0 {
            return Err(Error::Config("empty training set".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Training-set RMSE (regression, model units) or accuracy.
    pub eval_metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
        }
        out.flush().map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Contiguous minibatches of `order`; a trailing single row joins the
/// previous batch so batch statistics stay defined.
pub fn minibatches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let prev = out.pop().map_or(0, <[usize]>::len);
        out.push(&order[order.len() - prev - 1..]);
    }
    out
}

/// Bootstrap resample of `0..n` (with replacement).
pub fn bootstrap_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

fn loss_kind(cfg: &TrainConfig, model: &TinyDeModel) -> LossKind {
    cfg.loss.unwrap_or_else(|| LossKind::for_task(model.task()))
}

/// Training-set quality of an `[B, K]` output.
fn quality(kind: LossKind, out: &Tensor, y: &Tensor) -> Result<f64> {
    match kind {
        LossKind::CrossEntropy => {
            let labels = labels_from(y)?;
            let hits = labels
                .iter()
                .enumerate()
                .filter(|(i, &l)| {
                    let row = out.row(*i);
                    let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                    best == l
                })
                .count();
            Ok(hits as f64 / labels.len().max(1) as f64)
        }
        LossKind::Mse | LossKind::GaussianNll => {
            let k = y.dim(1);
            let mut se = 0.0;
            for i in 0..y.dim(0) {
                for j in 0..k {
                    let d = out.row(i)[j] - y.row(i)[j];
                    se += d * d;
                }
            }
            Ok((se / y.len().max(1) as f64).sqrt())
        }
    }
}

/// Sequential-mode loop shared by phase one and phase two.
fn train_member(
    model: &mut TinyDeModel,
    m: usize,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    bootstrap: bool,
) -> Result<TrainLog> {
    cfg.validate(model, data.len())?;
    let kind = loss_kind(cfg, model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<usize> = if bootstrap {
        bootstrap_indices(data.len(), seed)
    } else {
        (0..data.len()).collect()
    };
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut log = TrainLog::default();
    let mut order = base.clone();
    for epoch in 0..cfg.epochs {
        order.copy_from_slice(&base);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in minibatches(&order, cfg.batch_size) {
            let x = data.x.select_leading(batch)?;
            let y = data.y.select_leading(batch)?;
            let (out, trace) = model.forward_trace_member(&x, m, Phase::Train)?;
            let (loss, dout) = kind.evaluate(&out, &y)?;
            let grads = model.backward(&trace, &dout)?;
            opt.apply(model, &grads)?;
            total += loss * batch.len() as f64;
        }
        let out = model.forward_member_eval(&data.x, m)?;
        log.records.push(EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            eval_metric: quality(kind, &out, &data.y)?,
        });
    }
    Ok(log)
}

/// Phase one: all parameters, member 0's normalization active.
pub fn train_full(model: &mut TinyDeModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    if model.mode() != Mode::Sequential {
        return Err(Error::Mode("train_full runs on a sequential model".into()));
    }
    if model.is_frozen() {
        return Err(Error::State(
            "train_full needs unfrozen shared weights".into(),
        ));
    }
    train_member(model, 0, data, cfg, cfg.seed, false)
}

/// Phase two for one member: only its normalization parameters move.
pub fn train_member_norms(
    model: &mut TinyDeModel,
    m: usize,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if model.mode() != Mode::Sequential {
        return Err(Error::Mode(
            "train_member_norms runs on a sequential model".into(),
        ));
    }
    if !model.is_frozen() {
        return Err(Error::State(
            "shared weights must be frozen before member training".into(),
        ));
    }
    if m >= model.members() {
        return Err(Error::Index {
            index: m,
            limit: model.members(),
        });
    }
    train_member(model, m, data, cfg, cfg.member_seed(m), cfg.bootstrap)
}

/// Phase one, freeze, then every further member from a fresh normalization
/// state. Members train concurrently on copies and are merged by index.
/// Returns the phase-one log followed by one log per retrained member.
pub fn train_two_phase(
    model: &mut TinyDeModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<TrainLog>> {
    let mut logs = vec![train_full(model, data, cfg)?];
    model.freeze_shared();
    let first = if cfg.retune_member0 { 0 } else { 1 };
    let members: Vec<usize> = (first..model.members()).collect();
    let trained: Vec<(usize, TinyDeModel, TrainLog)> = members
        .par_iter()
        .map(|&m| {
            let mut copy = model.clone();
            copy.reinit_norm_member(m)?;
            let log = train_member_norms(&mut copy, m, data, cfg)?;
            Ok((m, copy, log))
        })
        .collect::<Result<_>>()?;
    for (m, copy, log) in trained {
        model.copy_norm_member_from(&copy, m, m)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Joint training on minibatches tiled `M` times. The loss is the mean of
/// the member losses. Members `1..M` start from jittered normalization
/// parameters; with `bootstrap` each member block draws its rows from the
/// member's own resample.
pub fn train_single_shot(
    model: &mut TinyDeModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if model.mode() != Mode::Parallel {
        return Err(Error::Mode(
            "single-shot training runs on a parallel model".into(),
        ));
    }
    cfg.validate(model, data.len())?;
    let kind = loss_kind(cfg, model);
    let members = model.members();
    if cfg.init_jitter > 0.0 {
        for m in 1..members {
            model.jitter_norm_member(m, cfg.init_jitter, cfg.member_seed(m))?;
        }
    }
    let samples: Vec<Vec<usize>> = (0..members)
        .map(|m| {
            if cfg.bootstrap {
                bootstrap_indices(data.len(), cfg.member_seed(m))
            } else {
                (0..data.len()).collect()
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in minibatches(&order, cfg.batch_size) {
            let (out, trace, ys) = if cfg.bootstrap {
                let mut xs = Vec::with_capacity(members);
                let mut ys = Vec::with_capacity(members);
                for sample in &samples {
                    let rows: Vec<usize> = batch.iter().map(|&i| sample[i]).collect();
                    xs.push(data.x.select_leading(&rows)?);
                    ys.push(data.y.select_leading(&rows)?);
                }
                let (out, trace) =
                    model.forward_trace_blocks(&Tensor::concat_leading(&xs)?, Phase::Train)?;
                (out, trace, ys)
            } else {
                let x = data.x.select_leading(batch)?;
                let (out, trace) = model.forward_trace_parallel(&x, Phase::Train)?;
                (out, trace, vec![data.y.select_leading(batch)?])
            };
            let (loss, dout) = member_block_loss(kind, &out, &ys, members)?;
            let grads = model.backward(&trace, &dout)?;
            opt.apply(model, &grads)?;
            total += loss * batch.len() as f64;
        }
        let out = model.forward_parallel_eval(&data.x)?;
        let mean = out.reduce(&[0], crate::tensor::Reduction::Mean)?;
        log.records.push(EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            eval_metric: quality(kind, &mean, &data.y)?,
        });
    }
    Ok(log)
}

/// Mean of per-member losses over a flat `[M * B, K]` output.
pub fn single_shot_loss(
    kind: LossKind,
    out: &Tensor,
    y: &Tensor,
    members: usize,
) -> Result<(f64, Tensor)> {
    member_block_loss(kind, out, std::slice::from_ref(y), members)
}

/// `ys` holds one target block per member, or a single block shared by all.
fn member_block_loss(
    kind: LossKind,
    out: &Tensor,
    ys: &[Tensor],
    members: usize,
) -> Result<(f64, Tensor)> {
    let b = ys[0].dim(0);
    if out.dim(0) != members * b || (ys.len() != 1 && ys.len() != members) {
        return Err(Error::dim(
            "single-shot output",
            out.shape(),
            &[members * b, out.dim(1)],
        ));
    }
    let mut loss = 0.0;
    let mut parts = Vec::with_capacity(members);
    for m in 0..members {
        let y = &ys[m.min(ys.len() - 1)];
        let (l, d) = kind.evaluate(&out.slice_leading(m * b, (m + 1) * b)?, y)?;
        loss += l;
        parts.push(d.scale(1.0 / members as f64));
    }
    Ok((loss / members as f64, Tensor::concat_leading(&parts)?))
}
