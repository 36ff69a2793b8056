//! Layers with hand-derived forward and backward passes.
//!
//! All activations are `[batch, features]`. Normalization follows
//! `y = gamma * (x - mean) / sqrt(var + eps) + beta` with population variance.
//! The batch variant takes statistics per feature over the batch and keeps
//! running estimates for evaluation; the layer variant takes statistics per
//! sample over its features and has no running state.
//!
//! [`EnsembleNormParams`] carries an extra leading member axis on every
//! parameter. Its input is `[M * B, F]`, viewed as `M` independent `[B, F]`
//! blocks, each normalized with its own statistics and its own row of
//! `gamma`/`beta`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Whether a forward pass uses batch statistics (and updates running ones).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Statistics over the batch, per feature.
    #[default]
    Batch,
    /// Statistics over the features, per sample.
    Layer,
}

impl NormKind {
    pub fn has_running_stats(self) -> bool {
        matches!(self, NormKind::Batch)
    }
}

// ---------------------------------------------------------------------------
// linear

/// Affine layer `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    /// Frozen layers still propagate input gradients but report no parameter
    /// gradients.
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    input: Tensor,
    out_features: usize,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.dim(0)] {
            return Err(Error::dim(
                "linear weight/bias",
                weight.shape(),
                bias.shape(),
            ));
        }
        Ok(LinearLayer {
            weight,
            bias,
            frozen: false,
        })
    }

    /// Uniform init in `±sqrt(1 / fan_in)` for weights and biases.
    pub fn init_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let w = draw(fan_in * fan_out);
        let b = draw(fan_out);
        LinearLayer {
            weight: Tensor::new(vec![fan_out, fan_in], w).expect("consistent shape"),
            bias: Tensor::vector(b),
            frozen: false,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LinearCache)> {
        let y = self.apply(x)?;
        Ok((
            y,
            LinearCache {
                input: x.clone(),
                out_features: self.out_features(),
            },
        ))
    }

    /// Forward pass without a cache.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (fi, fo) = (self.in_features(), self.out_features());
        if x.rank() != 2 || x.dim(1) != fi {
            return Err(Error::dim("linear input", x.shape(), self.weight.shape()));
        }
        let rows = x.dim(0);
        let w = self.weight.data();
        let b = self.bias.data();
        let mut out = vec![0.0; rows * fo];
        for i in 0..rows {
            let xr = x.row(i);
            for o in 0..fo {
                let wr = &w[o * fi..(o + 1) * fi];
                let mut acc = 0.0;
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                out[i * fo + o] = acc + b[o];
            }
        }
        Tensor::new(vec![rows, fo], out)
    }

    pub fn backward(&self, cache: &LinearCache, dy: &Tensor) -> Result<LinearGrads> {
        let rows = cache.input.dim(0);
        if dy.shape() != [rows, cache.out_features] || cache.out_features != self.out_features() {
            return Err(Error::State(format!(
                "linear backward: cache expects [{rows}, {}], got {:?}",
                cache.out_features,
                dy.shape()
            )));
        }
        let dx = dy.matmul(&self.weight)?;
        if self.frozen {
            return Ok(LinearGrads {
                dx,
                dw: None,
                db: None,
            });
        }
        let dw = dy.transpose()?.matmul(&cache.input)?;
        let mut db = vec![0.0; cache.out_features];
        for i in 0..rows {
            for (acc, &g) in db.iter_mut().zip(dy.row(i)) {
                *acc += g;
            }
        }
        let db = Tensor::vector(db);
        Ok(LinearGrads {
            dx,
            dw: Some(dw),
            db: Some(db),
        })
    }
}

// ---------------------------------------------------------------------------
// relu6

#[derive(Debug, Clone)]
pub struct Relu6Cache {
    input: Tensor,
}

pub fn relu6_forward(x: &Tensor) -> (Tensor, Relu6Cache) {
    (
        x.map_fn(|v| v.clamp(0.0, 6.0)),
        Relu6Cache { input: x.clone() },
    )
}

/// Passes `dy` where `0 < x < 6`; the kinks get subgradient 0.
pub fn relu6_backward(cache: &Relu6Cache, dy: &Tensor) -> Result<Tensor> {
    if dy.shape() != cache.input.shape() {
        return Err(Error::State(format!(
            "relu6 backward: cache {:?}, dy {:?}",
            cache.input.shape(),
            dy.shape()
        )));
    }
    let data = cache
        .input
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &g)| if x > 0.0 && x < 6.0 { g } else { 0.0 })
        .collect();
    Tensor::new(dy.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// normalization

/// Parameters of a single normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    pub kind: NormKind,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Tensor,
    /// Per feature (batch statistics) or per row (layer statistics).
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    kind: NormKind,
    batch_stats: bool,
}

#[derive(Debug, Clone)]
pub struct NormGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

impl NormParams {
    pub fn new(features: usize, kind: NormKind) -> Self {
        NormParams {
            gamma: Tensor::ones(&[features]),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::ones(&[features]),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            kind,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Back to `gamma = 1, beta = 0, running_mean = 0, running_var = 1`.
    pub fn reinit(&mut self) {
        let f = self.features();
        self.gamma = Tensor::ones(&[f]);
        self.beta = Tensor::zeros(&[f]);
        self.running_mean = Tensor::zeros(&[f]);
        self.running_var = Tensor::ones(&[f]);
    }

    pub fn learnable_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.features();
        for t in [&self.beta, &self.running_mean, &self.running_var] {
            if t.shape() != [f] {
                return Err(Error::dim("norm parameter", &[f], t.shape()));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Value(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Value(format!(
                "momentum must lie in (0, 1), got {}",
                self.momentum
            )));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Value("negative running variance".into()));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, phase: Phase) -> Result<(Tensor, NormCache)> {
        if self.kind != NormKind::Batch || phase == Phase::Eval {
            return self.forward_eval(x);
        }
        let f = self.check_input(x)?;
        let b = x.dim(0);
        if b < 2 {
            return Err(Error::Degenerate(format!(
                "batch normalization in train mode needs at least 2 rows, got {b}"
            )));
        }
        let (mean, var) = column_stats(x.data(), b, f);
        let m = self.momentum;
        for j in 0..f {
            let rm = &mut self.running_mean.data_mut()[j];
            *rm = (1.0 - m) * *rm + m * mean[j];
            let rv = &mut self.running_var.data_mut()[j];
            *rv = (1.0 - m) * *rv + m * var[j];
        }
        self.apply_columns(x, &mean, &var, true)
    }

    /// Evaluation-mode forward; never touches the running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<(Tensor, NormCache)> {
        let f = self.check_input(x)?;
        match self.kind {
            NormKind::Batch => {
                self.apply_columns(x, self.running_mean.data(), self.running_var.data(), false)
            }
            NormKind::Layer => {
                if f < 2 {
                    return Err(Error::Degenerate(
                        "layer normalization needs at least 2 features".into(),
                    ));
                }
                let b = x.dim(0);
                let mut xhat = vec![0.0; b * f];
                let mut y = vec![0.0; b * f];
                let mut inv_std = Vec::with_capacity(b);
                let (g, be) = (self.gamma.data(), self.beta.data());
                for i in 0..b {
                    let row = x.row(i);
                    let (mean, var) = row_stats(row);
                    let inv = 1.0 / (var + self.eps).sqrt();
                    inv_std.push(inv);
                    for j in 0..f {
                        let h = (row[j] - mean) * inv;
                        xhat[i * f + j] = h;
                        y[i * f + j] = g[j] * h + be[j];
                    }
                }
                Ok((
                    Tensor::new(vec![b, f], y)?,
                    NormCache {
                        xhat: Tensor::new(vec![b, f], xhat)?,
                        inv_std,
                        gamma: g.to_vec(),
                        kind: NormKind::Layer,
                        batch_stats: true,
                    },
                ))
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let f = self.features();
        if x.rank() != 2 || x.dim(1) != f {
            return Err(Error::dim("norm input", x.shape(), &[f]));
        }
        Ok(f)
    }

    fn apply_columns(
        &self,
        x: &Tensor,
        mean: &[f64],
        var: &[f64],
        batch_stats: bool,
    ) -> Result<(Tensor, NormCache)> {
        let (b, f) = (x.dim(0), x.dim(1));
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; b * f];
        let mut y = vec![0.0; b * f];
        let (g, be) = (self.gamma.data(), self.beta.data());
        for i in 0..b {
            for j in 0..f {
                let h = (x.data()[i * f + j] - mean[j]) * inv_std[j];
                xhat[i * f + j] = h;
                y[i * f + j] = g[j] * h + be[j];
            }
        }
        Ok((
            Tensor::new(vec![b, f], y)?,
            NormCache {
                xhat: Tensor::new(vec![b, f], xhat)?,
                inv_std,
                gamma: g.to_vec(),
                kind: NormKind::Batch,
                batch_stats,
            },
        ))
    }
}

fn column_stats(x: &[f64], b: usize, f: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; f];
    for i in 0..b {
        for j in 0..f {
            mean[j] += x[i * f + j];
        }
    }
    for m in &mut mean {
        *m /= b as f64;
    }
    let mut var = vec![0.0; f];
    for i in 0..b {
        for j in 0..f {
            let d = x[i * f + j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= b as f64;
    }
    (mean, var)
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mut mean = 0.0;
    for &v in row {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    (mean, var / n)
}

/// Backward pass through one normalization layer, including the dependence
/// of the batch (or row) statistics on the input.
pub fn norm_backward(cache: &NormCache, dy: &Tensor) -> Result<NormGrads> {
    if dy.shape() != cache.xhat.shape() {
        return Err(Error::State(format!(
            "norm backward: cache {:?}, dy {:?}",
            cache.xhat.shape(),
            dy.shape()
        )));
    }
    let (b, f) = (dy.dim(0), dy.dim(1));
    let (dx, dgamma, dbeta) = block_backward(
        dy.data(),
        cache.xhat.data(),
        &cache.inv_std,
        &cache.gamma,
        b,
        f,
        cache.kind,
        cache.batch_stats,
    );
    Ok(NormGrads {
        dx: Tensor::new(vec![b, f], dx)?,
        dgamma: Tensor::vector(dgamma),
        dbeta: Tensor::vector(dbeta),
    })
}

/// Shared arithmetic for one `[b, f]` block.
#[allow(clippy::too_many_arguments)]
fn block_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    b: usize,
    f: usize,
    kind: NormKind,
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    for i in 0..b {
        for j in 0..f {
            dgamma[j] += dy[i * f + j] * xhat[i * f + j];
            dbeta[j] += dy[i * f + j];
        }
    }
    let mut dx = vec![0.0; b * f];
    match (kind, batch_stats) {
        (NormKind::Batch, false) => {
            for i in 0..b {
                for j in 0..f {
                    dx[i * f + j] = dy[i * f + j] * gamma[j] * inv_std[j];
                }
            }
        }
        (NormKind::Batch, true) => {
            let n = b as f64;
            let mut sum_d = vec![0.0; f];
            let mut sum_dh = vec![0.0; f];
            for i in 0..b {
                for j in 0..f {
                    let d = dy[i * f + j] * gamma[j];
                    sum_d[j] += d;
                    sum_dh[j] += d * xhat[i * f + j];
                }
            }
            for i in 0..b {
                for j in 0..f {
                    let d = dy[i * f + j] * gamma[j];
                    dx[i * f + j] =
                        inv_std[j] / n * (n * d - sum_d[j] - xhat[i * f + j] * sum_dh[j]);
                }
            }
        }
        (NormKind::Layer, _) => {
            let n = f as f64;
            for i in 0..b {
                let mut sum_d = 0.0;
                let mut sum_dh = 0.0;
                for j in 0..f {
                    let d = dy[i * f + j] * gamma[j];
                    sum_d += d;
                    sum_dh += d * xhat[i * f + j];
                }
                for j in 0..f {
                    let d = dy[i * f + j] * gamma[j];
                    dx[i * f + j] = inv_std[i] / n * (n * d - sum_d - xhat[i * f + j] * sum_dh);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// ensemble normalization

/// `M` normalization parameter sets packed along a leading member axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleNormParams {
    pub members: usize,
    /// `[M, F]`
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    pub kind: NormKind,
}

#[derive(Debug, Clone)]
pub struct EnsembleNormCache {
    members: usize,
    xhat: Tensor,
    /// `[M, F]` for batch statistics, `[M * B]` for layer statistics.
    inv_std: Vec<f64>,
    gamma: Tensor,
    kind: NormKind,
    batch_stats: bool,
}

#[derive(Debug, Clone)]
pub struct EnsembleNormGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

impl EnsembleNormParams {
    pub fn new(members: usize, features: usize, kind: NormKind) -> Self {
        let one = NormParams::new(features, kind);
        Self::from_members(&vec![one; members]).expect("uniform members")
    }

    /// Packs member parameter sets; they must agree on width, eps, momentum
    /// and kind.
    pub fn from_members(members: &[NormParams]) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Degenerate("ensemble of zero members".into()))?;
        let f = first.features();
        for p in members {
            p.validate()?;
            if p.features() != f
                || p.eps != first.eps
                || p.momentum != first.momentum
                || p.kind != first.kind
            {
                return Err(Error::Value(
                    "ensemble members disagree on width, eps, momentum or kind".into(),
                ));
            }
        }
        let stack = |get: fn(&NormParams) -> &Tensor| {
            let mut d = Vec::with_capacity(members.len() * f);
            for p in members {
                d.extend_from_slice(get(p).data());
            }
            Tensor::new(vec![members.len(), f], d).expect("consistent shape")
        };
        Ok(EnsembleNormParams {
            members: members.len(),
            gamma: stack(|p| &p.gamma),
            beta: stack(|p| &p.beta),
            running_mean: stack(|p| &p.running_mean),
            running_var: stack(|p| &p.running_var),
            eps: first.eps,
            momentum: first.momentum,
            kind: first.kind,
        })
    }

    pub fn features(&self) -> usize {
        self.gamma.dim(1)
    }

    /// Row `m` as a standalone parameter set.
    pub fn member(&self, m: usize) -> Result<NormParams> {
        if m >= self.members {
            return Err(Error::Index {
                index: m,
                limit: self.members,
            });
        }
        let row = |t: &Tensor| Tensor::vector(t.row(m).to_vec());
        Ok(NormParams {
            gamma: row(&self.gamma),
            beta: row(&self.beta),
            running_mean: row(&self.running_mean),
            running_var: row(&self.running_var),
            eps: self.eps,
            momentum: self.momentum,
            kind: self.kind,
        })
    }

    pub fn to_members(&self) -> Vec<NormParams> {
        (0..self.members)
            .map(|m| self.member(m).expect("in range"))
            .collect()
    }

    pub fn set_member(&mut self, m: usize, p: &NormParams) -> Result<()> {
        if m >= self.members {
            return Err(Error::Index {
                index: m,
                limit: self.members,
            });
        }
        if p.features() != self.features() {
            return Err(Error::dim(
                "ensemble member width",
                &[self.features()],
                &[p.features()],
            ));
        }
        self.gamma.row_mut(m).copy_from_slice(p.gamma.data());
        self.beta.row_mut(m).copy_from_slice(p.beta.data());
        self.running_mean
            .row_mut(m)
            .copy_from_slice(p.running_mean.data());
        self.running_var
            .row_mut(m)
            .copy_from_slice(p.running_var.data());
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (m_count, f) = (self.members, self.features());
        if x.rank() != 2 || x.dim(1) != f || !x.dim(0).is_multiple_of(m_count) {
            return Err(Error::dim(
                "ensemble norm input must be [M*B, F]",
                x.shape(),
                &[m_count, f],
            ));
        }
        Ok(x.dim(0) / m_count)
    }

    /// Normalizes `x: [M * B, F]` block by block.
    pub fn forward(&mut self, x: &Tensor, phase: Phase) -> Result<(Tensor, EnsembleNormCache)> {
        if self.kind != NormKind::Batch || phase == Phase::Eval {
            return self.forward_eval(x);
        }
        let b = self.check_input(x)?;
        if b < 2 {
            return Err(Error::Degenerate(format!(
                "batch normalization in train mode needs at least 2 rows per member, got {b}"
            )));
        }
        let (m_count, f) = (self.members, self.features());
        let block = b * f;
        let xs = x.data();
        // indexed [m * f + j]
        let mut mean = vec![0.0; m_count * f];
        let mut var = vec![0.0; m_count * f];
        for m in 0..m_count {
            for i in 0..b {
                for j in 0..f {
                    mean[m * f + j] += xs[m * block + i * f + j];
                }
            }
            for j in 0..f {
                mean[m * f + j] /= b as f64;
            }
            for i in 0..b {
                for j in 0..f {
                    let d = xs[m * block + i * f + j] - mean[m * f + j];
                    var[m * f + j] += d * d;
                }
            }
            for j in 0..f {
                var[m * f + j] /= b as f64;
            }
        }
        let mo = self.momentum;
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *r = (1.0 - mo) * *r + mo * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&var) {
            *r = (1.0 - mo) * *r + mo * v;
        }
        self.apply_blocks(x, b, &mean, &var, true)
    }

    /// Evaluation-mode forward; never touches the running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<(Tensor, EnsembleNormCache)> {
        let b = self.check_input(x)?;
        let (m_count, f) = (self.members, self.features());
        match self.kind {
            NormKind::Batch => self.apply_blocks(
                x,
                b,
                self.running_mean.data(),
                self.running_var.data(),
                false,
            ),
            NormKind::Layer => {
                if f < 2 {
                    return Err(Error::Degenerate(
                        "layer normalization needs at least 2 features".into(),
                    ));
                }
                let block = b * f;
                let xs = x.data();
                let mut y = vec![0.0; m_count * block];
                let mut xhat = vec![0.0; m_count * block];
                let mut inv = vec![0.0; m_count * b];
                let (g, be) = (self.gamma.data(), self.beta.data());
                for m in 0..m_count {
                    for i in 0..b {
                        let base = m * block + i * f;
                        let row = &xs[base..base + f];
                        let (mean, var) = row_stats(row);
                        let s = 1.0 / (var + self.eps).sqrt();
                        inv[m * b + i] = s;
                        for j in 0..f {
                            let h = (row[j] - mean) * s;
                            xhat[base + j] = h;
                            y[base + j] = g[m * f + j] * h + be[m * f + j];
                        }
                    }
                }
                Ok((
                    Tensor::new(x.shape().to_vec(), y)?,
                    EnsembleNormCache {
                        members: m_count,
                        xhat: Tensor::new(x.shape().to_vec(), xhat)?,
                        inv_std: inv,
                        gamma: self.gamma.clone(),
                        kind: NormKind::Layer,
                        batch_stats: true,
                    },
                ))
            }
        }
    }

    fn apply_blocks(
        &self,
        x: &Tensor,
        b: usize,
        mean: &[f64],
        var: &[f64],
        batch_stats: bool,
    ) -> Result<(Tensor, EnsembleNormCache)> {
        let (m_count, f) = (self.members, self.features());
        let block = b * f;
        let xs = x.data();
        let mut y = vec![0.0; m_count * block];
        let mut xhat = vec![0.0; m_count * block];
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (g, be) = (self.gamma.data(), self.beta.data());
        for m in 0..m_count {
            for i in 0..b {
                for j in 0..f {
                    let k = m * block + i * f + j;
                    let h = (xs[k] - mean[m * f + j]) * inv[m * f + j];
                    xhat[k] = h;
                    y[k] = g[m * f + j] * h + be[m * f + j];
                }
            }
        }
        Ok((
            Tensor::new(x.shape().to_vec(), y)?,
            EnsembleNormCache {
                members: m_count,
                xhat: Tensor::new(x.shape().to_vec(), xhat)?,
                inv_std: inv,
                gamma: self.gamma.clone(),
                kind: NormKind::Batch,
                batch_stats,
            },
        ))
    }
}

/// Backward pass of [`EnsembleNormParams::forward`]; member blocks never
/// exchange gradient.
pub fn ensemblenorm_backward(cache: &EnsembleNormCache, dy: &Tensor) -> Result<EnsembleNormGrads> {
    if dy.shape() != cache.xhat.shape() {
        return Err(Error::State(format!(
            "ensemble norm backward: cache {:?}, dy {:?}",
            cache.xhat.shape(),
            dy.shape()
        )));
    }
    let m_count = cache.members;
    let f = dy.dim(1);
    let b = dy.dim(0) / m_count;
    let block = b * f;
    let mut dx = Vec::with_capacity(m_count * block);
    let mut dgamma = Vec::with_capacity(m_count * f);
    let mut dbeta = Vec::with_capacity(m_count * f);
    for m in 0..m_count {
        let inv = match cache.kind {
            NormKind::Batch => &cache.inv_std[m * f..(m + 1) * f],
            NormKind::Layer => &cache.inv_std[m * b..(m + 1) * b],
        };
        let (bx, bg, bb) = block_backward(
            &dy.data()[m * block..(m + 1) * block],
            &cache.xhat.data()[m * block..(m + 1) * block],
            inv,
            cache.gamma.row(m),
            b,
            f,
            cache.kind,
            cache.batch_stats,
        );
        dx.extend(bx);
        dgamma.extend(bg);
        dbeta.extend(bb);
    }
    Ok(EnsembleNormGrads {
        dx: Tensor::new(dy.shape().to_vec(), dx)?,
        dgamma: Tensor::new(vec![m_count, f], dgamma)?,
        dbeta: Tensor::new(vec![m_count, f], dbeta)?,
    })
}
