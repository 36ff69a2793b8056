//! Shared-weight ensembles that differ only in their normalization layers.
//!
//! A [`TinyDeModel`] is an MLP `Linear -> Norm -> ReLU6 -> ... -> Linear`.
//! Every linear layer exists exactly once; each normalized position holds a
//! [`NormBank`] with one parameter set per member.
//!
//! Two execution routes produce the same `[M, B, K]` member outputs:
//!
//! * sequential: `M` passes, each normalization layer picking the member given
//!   by its local counter, counters advanced in lockstep after every pass;
//! * parallel: the input is tiled to `[M * B, F]` and pushed once through the
//!   shared layers and [`EnsembleNormParams`] layers.
//!
//! In evaluation mode both routes are numerically identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    ensemblenorm_backward, norm_backward, relu6_backward, relu6_forward, EnsembleNormCache,
    EnsembleNormParams, LinearCache, LinearLayer, NormCache, NormKind, NormParams, Phase,
    Relu6Cache, DEFAULT_EPS, DEFAULT_MOMENTUM,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenSpec {
    pub width: usize,
    #[serde(default = "yes")]
    pub normalized: bool,
}

fn yes() -> bool {
    true
}

/// Topology and hyper-parameters of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<HiddenSpec>,
    pub output_dim: usize,
    pub members: usize,
    #[serde(default)]
    pub norm_kind: NormKind,
    pub task: Task,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

impl ModelSpec {
    /// `input -> width -> ... -> output`, every hidden layer normalized.
    pub fn mlp(
        input_dim: usize,
        widths: &[usize],
        output_dim: usize,
        members: usize,
        task: Task,
    ) -> Self {
        ModelSpec {
            input_dim,
            hidden: widths
                .iter()
                .map(|&width| HiddenSpec {
                    width,
                    normalized: true,
                })
                .collect(),
            output_dim,
            members,
            norm_kind: NormKind::Batch,
            task,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members == 0 {
            return Err(Error::Config("ensemble size must be at least 1".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|h| h.width == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.eps > 0.0) || !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(
                "eps must be > 0 and momentum in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// The `M` normalization parameter sets of one layer position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormBank {
    Sequential(Vec<NormParams>),
    Parallel(EnsembleNormParams),
}

impl NormBank {
    pub fn members(&self) -> usize {
        match self {
            NormBank::Sequential(v) => v.len(),
            NormBank::Parallel(e) => e.members,
        }
    }

    pub fn features(&self) -> usize {
        match self {
            NormBank::Sequential(v) => v[0].features(),
            NormBank::Parallel(e) => e.features(),
        }
    }

    pub fn member(&self, m: usize) -> Result<NormParams> {
        match self {
            NormBank::Sequential(v) => v.get(m).cloned().ok_or(Error::Index {
                index: m,
                limit: v.len(),
            }),
            NormBank::Parallel(e) => e.member(m),
        }
    }

    pub fn set_member(&mut self, m: usize, p: &NormParams) -> Result<()> {
        match self {
            NormBank::Sequential(v) => {
                let limit = v.len();
                let slot = v.get_mut(m).ok_or(Error::Index { index: m, limit })?;
                *slot = p.clone();
                Ok(())
            }
            NormBank::Parallel(e) => e.set_member(m, p),
        }
    }

    pub fn to_parallel(&self) -> Result<NormBank> {
        match self {
            NormBank::Sequential(v) => Ok(NormBank::Parallel(EnsembleNormParams::from_members(v)?)),
            NormBank::Parallel(e) => Ok(NormBank::Parallel(e.clone())),
        }
    }

    pub fn to_sequential(&self) -> NormBank {
        match self {
            NormBank::Sequential(v) => NormBank::Sequential(v.clone()),
            NormBank::Parallel(e) => NormBank::Sequential(e.to_members()),
        }
    }

    /// Learnable parameters (`gamma`, `beta`) over all members.
    pub fn learnable_count(&self) -> usize {
        2 * self.members() * self.features()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenBlock {
    pub linear: LinearLayer,
    pub norm: Option<NormBank>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDeModel {
    spec: ModelSpec,
    blocks: Vec<HiddenBlock>,
    head: LinearLayer,
    /// One counter per normalized position.
    counters: Vec<usize>,
    mode: Mode,
}

/// Member-averaged prediction plus the raw member outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[B, K]`
    pub mean: Tensor,
    /// `[M, B, K]`; probabilities for classification, raw outputs otherwise.
    pub samples: Tensor,
}

/// Identifies a trainable tensor inside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    Weight(usize),
    Bias(usize),
    /// `member == None` addresses the packed `[M, F]` tensor of a parallel bank.
    Gamma {
        layer: usize,
        member: Option<usize>,
    },
    Beta {
        layer: usize,
        member: Option<usize>,
    },
}

/// Gradient of one normalization bank.
#[derive(Debug, Clone, PartialEq)]
pub enum NormGrad {
    Member {
        member: usize,
        dgamma: Tensor,
        dbeta: Tensor,
    },
    Ensemble {
        dgamma: Tensor,
        dbeta: Tensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
    pub norm: Option<NormGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub blocks: Vec<BlockGrads>,
    pub head_dw: Option<Tensor>,
    pub head_db: Option<Tensor>,
    pub dx: Tensor,
}

impl ModelGrads {
    /// Every present gradient with its parameter key.
    pub fn entries(&self) -> Vec<(ParamKey, &Tensor)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            if let Some(dw) = &b.dw {
                out.push((ParamKey::Weight(l), dw));
            }
            if let Some(db) = &b.db {
                out.push((ParamKey::Bias(l), db));
            }
            match &b.norm {
                Some(NormGrad::Member {
                    member,
                    dgamma,
                    dbeta,
                }) => {
                    out.push((
                        ParamKey::Gamma {
                            layer: l,
                            member: Some(*member),
                        },
                        dgamma,
                    ));
                    out.push((
                        ParamKey::Beta {
                            layer: l,
                            member: Some(*member),
                        },
                        dbeta,
                    ));
                }
                Some(NormGrad::Ensemble { dgamma, dbeta }) => {
                    out.push((
                        ParamKey::Gamma {
                            layer: l,
                            member: None,
                        },
                        dgamma,
                    ));
                    out.push((
                        ParamKey::Beta {
                            layer: l,
                            member: None,
                        },
                        dbeta,
                    ));
                }
                None => {}
            }
        }
        let head = self.blocks.len();
        if let Some(dw) = &self.head_dw {
            out.push((ParamKey::Weight(head), dw));
        }
        if let Some(db) = &self.head_db {
            out.push((ParamKey::Bias(head), db));
        }
        out
    }
}

enum NormTrace {
    Member(usize, NormCache),
    Ensemble(EnsembleNormCache),
}

struct BlockTrace {
    linear: LinearCache,
    norm: Option<NormTrace>,
    act: Relu6Cache,
}

/// Everything a backward pass needs from a training forward pass.
pub struct ForwardTrace {
    blocks: Vec<BlockTrace>,
    head: LinearCache,
}

impl TinyDeModel {
    /// Fresh model in sequential mode; weights drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = spec.input_dim;
        let mut blocks = Vec::with_capacity(spec.hidden.len());
        for h in &spec.hidden {
            let linear = LinearLayer::init_uniform(fan_in, h.width, &mut rng);
            let norm = h.normalized.then(|| {
                let p = NormParams::new(h.width, spec.norm_kind)
                    .with_eps(spec.eps)
                    .with_momentum(spec.momentum);
                NormBank::Sequential(vec![p; spec.members])
            });
            blocks.push(HiddenBlock { linear, norm });
            fan_in = h.width;
        }
        let head = LinearLayer::init_uniform(fan_in, spec.output_dim, &mut rng);
        let banks = blocks.iter().filter(|b| b.norm.is_some()).count();
        Ok(TinyDeModel {
            spec,
            blocks,
            head,
            counters: vec![0; banks],
            mode: Mode::Sequential,
        })
    }

    /// Reassembles a model from parts, e.g. after loading a checkpoint.
    pub fn from_parts(
        spec: ModelSpec,
        blocks: Vec<HiddenBlock>,
        head: LinearLayer,
        mode: Mode,
    ) -> Result<Self> {
        spec.validate()?;
        if blocks.len() != spec.hidden.len() {
            return Err(Error::Value("block count does not match spec".into()));
        }
        let mut fan_in = spec.input_dim;
        for (b, h) in blocks.iter().zip(&spec.hidden) {
            if b.linear.in_features() != fan_in || b.linear.out_features() != h.width {
                return Err(Error::dim(
                    "block linear shape",
                    b.linear.weight.shape(),
                    &[h.width, fan_in],
                ));
            }
            match (&b.norm, h.normalized) {
                (Some(bank), true) => {
                    if bank.members() != spec.members || bank.features() != h.width {
                        return Err(Error::Value("norm bank does not match spec".into()));
                    }
                    let ok = matches!(
                        (bank, mode),
                        (NormBank::Sequential(_), Mode::Sequential)
                            | (NormBank::Parallel(_), Mode::Parallel)
                    );
                    if !ok {
                        return Err(Error::Mode("norm bank layout does not match mode".into()));
                    }
                }
                (None, false) => {}
                _ => {
                    return Err(Error::Value(
                        "normalized positions do not match spec".into(),
                    ))
                }
            }
            fan_in = h.width;
        }
        if head.in_features() != fan_in || head.out_features() != spec.output_dim {
            return Err(Error::dim(
                "head shape",
                head.weight.shape(),
                &[spec.output_dim, fan_in],
            ));
        }
        let banks = blocks.iter().filter(|b| b.norm.is_some()).count();
        Ok(TinyDeModel {
            spec,
            blocks,
            head,
            counters: vec![0; banks],
            mode,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn members(&self) -> usize {
        self.spec.members
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn task(&self) -> Task {
        self.spec.task
    }

    pub fn blocks(&self) -> &[HiddenBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [HiddenBlock] {
        &mut self.blocks
    }

    pub fn head(&self) -> &LinearLayer {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut LinearLayer {
        &mut self.head
    }

    pub fn counters(&self) -> &[usize] {
        &self.counters
    }

    /// Shared linear layers in forward order, head last.
    pub fn linears(&self) -> Vec<&LinearLayer> {
        self.blocks
            .iter()
            .map(|b| &b.linear)
            .chain(std::iter::once(&self.head))
            .collect()
    }

    /// Linear layers and normalization parameters that member `m` computes
    /// with. Linear layers are borrowed from the model itself, so every member
    /// view points at the same storage.
    pub fn member_view(&self, m: usize) -> Result<(Vec<&LinearLayer>, Vec<NormParams>)> {
        self.check_member(m)?;
        let norms = self
            .blocks
            .iter()
            .filter_map(|b| b.norm.as_ref())
            .map(|bank| bank.member(m))
            .collect::<Result<Vec<_>>>()?;
        Ok((self.linears(), norms))
    }

    /// Weight and bias entries stored by the model (counted once each).
    pub fn shared_param_count(&self) -> usize {
        self.linears().iter().map(|l| l.param_count()).sum()
    }

    /// Learnable normalization entries over all members.
    pub fn norm_param_count(&self) -> usize {
        self.blocks
            .iter()
            .filter_map(|b| b.norm.as_ref())
            .map(NormBank::learnable_count)
            .sum()
    }

    fn check_member(&self, m: usize) -> Result<()> {
        if m >= self.spec.members {
            return Err(Error::Index {
                index: m,
                limit: self.spec.members,
            });
        }
        Ok(())
    }

    fn require_mode(&self, mode: Mode, op: &str) -> Result<()> {
        if self.mode != mode {
            return Err(Error::Mode(format!(
                "{op} needs a {mode:?} model, this one is {:?}",
                self.mode
            )));
        }
        Ok(())
    }

    fn lockstep_counter(&self) -> usize {
        let c = self.counters.first().copied().unwrap_or(0);
        debug_assert!(
            self.counters.iter().all(|&x| x == c),
            "counters out of lockstep"
        );
        c
    }

    /// `c <- (c + 1) mod M` at every normalized position.
    pub fn advance_counters(&mut self) {
        let m = self.spec.members;
        for c in &mut self.counters {
            *c = (*c + 1) % m;
        }
    }

    pub fn reset_counters(&mut self) {
        self.counters.iter_mut().for_each(|c| *c = 0);
    }

    /// One sequential pass using the member selected by the current counters.
    /// Counters are not advanced.
    pub fn forward_member(&mut self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        self.require_mode(Mode::Sequential, "forward_member")?;
        let m = self.lockstep_counter();
        self.forward_member_index(x, m, phase)
    }

    /// One sequential pass through member `m`, independent of the counters.
    pub fn forward_member_index(&mut self, x: &Tensor, m: usize, phase: Phase) -> Result<Tensor> {
        self.require_mode(Mode::Sequential, "forward_member")?;
        self.check_member(m)?;
        if phase == Phase::Eval {
            return self.forward_member_eval(x, m);
        }
        let mut h = x.clone();
        for block in &mut self.blocks {
            h = block.linear.apply(&h)?;
            if let Some(NormBank::Sequential(members)) = &mut block.norm {
                h = members[m].forward(&h, phase)?.0;
            }
            h = relu6_forward(&h).0;
        }
        self.head.apply(&h)
    }

    /// Evaluation-mode pass through member `m` without mutating the model.
    pub fn forward_member_eval(&self, x: &Tensor, m: usize) -> Result<Tensor> {
        self.check_member(m)?;
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.linear.apply(&h)?;
            match &block.norm {
                Some(NormBank::Sequential(members)) => h = members[m].forward_eval(&h)?.0,
                Some(NormBank::Parallel(e)) => h = e.member(m)?.forward_eval(&h)?.0,
                None => {}
            }
            h = relu6_forward(&h).0;
        }
        self.head.apply(&h)
    }

    /// `M` sequential passes from counters = 0, advancing after each pass.
    /// Returns `[M, B, K]`; the counters end back at 0.
    pub fn forward_all_sequential(&mut self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        self.require_mode(Mode::Sequential, "forward_all_sequential")?;
        self.reset_counters();
        let mut outs = Vec::with_capacity(self.spec.members);
        for _ in 0..self.spec.members {
            outs.push(self.forward_member(x, phase)?);
            self.advance_counters();
        }
        debug_assert!(self.counters.iter().all(|&c| c == 0));
        stack_members(&outs)
    }

    /// Single pass over the input tiled `M` times. Returns `[M, B, K]`.
    pub fn forward_parallel(&mut self, x: &Tensor, phase: Phase) -> Result<Tensor> {
        self.require_mode(Mode::Parallel, "forward_parallel")?;
        if phase == Phase::Eval {
            return self.forward_parallel_eval(x);
        }
        let m = self.spec.members;
        let b = x.shape().first().copied().unwrap_or(0);
        let mut h = x.tile_leading(m);
        for block in &mut self.blocks {
            h = block.linear.apply(&h)?;
            if let Some(NormBank::Parallel(e)) = &mut block.norm {
                h = e.forward(&h, phase)?.0;
            }
            h = relu6_forward(&h).0;
        }
        let out = self.head.apply(&h)?;
        out.into_shape(&[m, b, self.spec.output_dim])
    }

    /// Evaluation-mode parallel pass; takes `&self` so it can be shared.
    pub fn forward_parallel_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.require_mode(Mode::Parallel, "forward_parallel")?;
        let m = self.spec.members;
        let b = x.shape().first().copied().unwrap_or(0);
        let mut h = x.tile_leading(m);
        for block in &self.blocks {
            h = block.linear.apply(&h)?;
            if let Some(NormBank::Parallel(e)) = &block.norm {
                h = e.forward_eval(&h)?.0;
            }
            h = relu6_forward(&h).0;
        }
        let out = self.head.apply(&h)?;
        out.into_shape(&[m, b, self.spec.output_dim])
    }

    /// Evaluation-mode member outputs via whichever route the mode selects.
    pub fn forward_members(&mut self, x: &Tensor) -> Result<Tensor> {
        match self.mode {
            Mode::Sequential => self.forward_all_sequential(x, Phase::Eval),
            Mode::Parallel => self.forward_parallel_eval(x),
        }
    }

    /// Averages member predictions (softmax first for classification).
    pub fn predict(&mut self, x: &Tensor) -> Result<Prediction> {
        let raw = self.forward_members(x)?;
        let samples = match self.spec.task {
            Task::Classification => raw.softmax_last_axis(),
            Task::Regression => raw,
        };
        let mean = samples.reduce(&[0], crate::tensor::Reduction::Mean)?;
        Ok(Prediction { mean, samples })
    }

    /// Marks every shared linear layer as frozen.
    pub fn freeze_shared(&mut self) {
        for b in &mut self.blocks {
            b.linear.frozen = true;
        }
        self.head.frozen = true;
    }

    pub fn unfreeze_shared(&mut self) {
        for b in &mut self.blocks {
            b.linear.frozen = false;
        }
        self.head.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.linears().iter().all(|l| l.frozen)
    }

    /// Resets member `m`'s normalization parameters at every position.
    pub fn reinit_norm_member(&mut self, m: usize) -> Result<()> {
        self.check_member(m)?;
        for bank in self.blocks.iter_mut().filter_map(|b| b.norm.as_mut()) {
            let mut p = bank.member(m)?;
            p.reinit();
            bank.set_member(m, &p)?;
        }
        Ok(())
    }

    /// Adds seeded `N(0, scale^2)` noise to member `m`'s `gamma` and `beta` at
    /// every position. Breaks the symmetry of identically initialized members.
    pub fn jitter_norm_member(&mut self, m: usize, scale: f64, seed: u64) -> Result<()> {
        self.check_member(m)?;
        let normal =
            Normal::new(0.0, scale).map_err(|e| Error::Config(format!("jitter scale: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for bank in self.blocks.iter_mut().filter_map(|b| b.norm.as_mut()) {
            let mut p = bank.member(m)?;
            for v in p.gamma.data_mut().iter_mut().chain(p.beta.data_mut()) {
                *v += normal.sample(&mut rng);
            }
            bank.set_member(m, &p)?;
        }
        Ok(())
    }

    /// Copies member `src`'s normalization parameters of `other` into member
    /// `dst` of `self`. Shapes must agree.
    pub fn copy_norm_member_from(
        &mut self,
        other: &TinyDeModel,
        src: usize,
        dst: usize,
    ) -> Result<()> {
        other.check_member(src)?;
        self.check_member(dst)?;
        for (mine, theirs) in self.blocks.iter_mut().zip(&other.blocks) {
            if let (Some(a), Some(b)) = (mine.norm.as_mut(), theirs.norm.as_ref()) {
                a.set_member(dst, &b.member(src)?)?;
            }
        }
        Ok(())
    }

    pub fn to_parallel(mut self) -> Result<Self> {
        for bank in self.blocks.iter_mut().filter_map(|b| b.norm.as_mut()) {
            *bank = bank.to_parallel()?;
        }
        self.mode = Mode::Parallel;
        self.reset_counters();
        Ok(self)
    }

    pub fn to_sequential(mut self) -> Self {
        for bank in self.blocks.iter_mut().filter_map(|b| b.norm.as_mut()) {
            *bank = bank.to_sequential();
        }
        self.mode = Mode::Sequential;
        self.reset_counters();
        self
    }

    // -- training support --------------------------------------------------

    /// Training forward through member `m` (sequential mode), keeping caches.
    pub fn forward_trace_member(
        &mut self,
        x: &Tensor,
        m: usize,
        phase: Phase,
    ) -> Result<(Tensor, ForwardTrace)> {
        self.require_mode(Mode::Sequential, "forward_trace_member")?;
        self.check_member(m)?;
        let mut h = x.clone();
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (z, lc) = block.linear.forward(&h)?;
            h = z;
            let norm = match &mut block.norm {
                Some(NormBank::Sequential(members)) => {
                    let (z, nc) = members[m].forward(&h, phase)?;
                    h = z;
                    Some(NormTrace::Member(m, nc))
                }
                Some(NormBank::Parallel(_)) => unreachable!("mode checked"),
                None => None,
            };
            let (z, ac) = relu6_forward(&h);
            h = z;
            traces.push(BlockTrace {
                linear: lc,
                norm,
                act: ac,
            });
        }
        let (out, hc) = self.head.forward(&h)?;
        Ok((
            out,
            ForwardTrace {
                blocks: traces,
                head: hc,
            },
        ))
    }

    /// Training forward over the tiled input (parallel mode). Output is the
    /// flat `[M * B, K]` block so a loss can be applied per member slice.
    pub fn forward_trace_parallel(
        &mut self,
        x: &Tensor,
        phase: Phase,
    ) -> Result<(Tensor, ForwardTrace)> {
        self.forward_trace_blocks(&x.tile_leading(self.spec.members), phase)
    }

    /// Like [`forward_trace_parallel`](Self::forward_trace_parallel) but
    /// takes `M` stacked member blocks `[M * B, F]`, which need not be copies
    /// of one batch.
    pub fn forward_trace_blocks(
        &mut self,
        blocks: &Tensor,
        phase: Phase,
    ) -> Result<(Tensor, ForwardTrace)> {
        self.require_mode(Mode::Parallel, "forward_trace_parallel")?;
        let members = self.spec.members;
        if blocks.rank() != 2 || !blocks.dim(0).is_multiple_of(members) {
            return Err(Error::dim(
                "member blocks",
                blocks.shape(),
                &[members, blocks.dim(1)],
            ));
        }
        let mut h = blocks.clone();
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (z, lc) = block.linear.forward(&h)?;
            h = z;
            let norm = match &mut block.norm {
                Some(NormBank::Parallel(e)) => {
                    let (z, nc) = e.forward(&h, phase)?;
                    h = z;
                    Some(NormTrace::Ensemble(nc))
                }
                Some(NormBank::Sequential(_)) => unreachable!("mode checked"),
                None => None,
            };
            let (z, ac) = relu6_forward(&h);
            h = z;
            traces.push(BlockTrace {
                linear: lc,
                norm,
                act: ac,
            });
        }
        let (out, hc) = self.head.forward(&h)?;
        Ok((
            out,
            ForwardTrace {
                blocks: traces,
                head: hc,
            },
        ))
    }

    /// Backpropagates `dout` (gradient of the loss w.r.t. the traced output).
    pub fn backward(&self, trace: &ForwardTrace, dout: &Tensor) -> Result<ModelGrads> {
        if trace.blocks.len() != self.blocks.len() {
            return Err(Error::State("trace does not belong to this model".into()));
        }
        let hg = self.head.backward(&trace.head, dout)?;
        let mut g = hg.dx;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (block, t) in self.blocks.iter().zip(&trace.blocks).rev() {
            g = relu6_backward(&t.act, &g)?;
            let norm = match &t.norm {
                Some(NormTrace::Member(m, nc)) => {
                    let ng = norm_backward(nc, &g)?;
                    g = ng.dx;
                    Some(NormGrad::Member {
                        member: *m,
                        dgamma: ng.dgamma,
                        dbeta: ng.dbeta,
                    })
                }
                Some(NormTrace::Ensemble(nc)) => {
                    let ng = ensemblenorm_backward(nc, &g)?;
                    g = ng.dx;
                    Some(NormGrad::Ensemble {
                        dgamma: ng.dgamma,
                        dbeta: ng.dbeta,
                    })
                }
                None => None,
            };
            let lg = block.linear.backward(&t.linear, &g)?;
            g = lg.dx;
            blocks.push(BlockGrads {
                dw: lg.dw,
                db: lg.db,
                norm,
            });
        }
        blocks.reverse();
        Ok(ModelGrads {
            blocks,
            head_dw: hg.dw,
            head_db: hg.db,
            dx: g,
        })
    }

    fn linear_mut(&mut self, l: usize) -> Result<&mut LinearLayer> {
        let n = self.blocks.len();
        if l == n {
            Ok(&mut self.head)
        } else {
            self.blocks
                .get_mut(l)
                .map(|b| &mut b.linear)
                .ok_or(Error::Index {
                    index: l,
                    limit: n + 1,
                })
        }
    }

    /// Mutable access to the tensor behind `key`.
    pub fn param_mut(&mut self, key: ParamKey) -> Result<&mut Tensor> {
        let n = self.blocks.len();
        match key {
            ParamKey::Weight(l) => Ok(&mut self.linear_mut(l)?.weight),
            ParamKey::Bias(l) => Ok(&mut self.linear_mut(l)?.bias),
            ParamKey::Gamma { layer, member } | ParamKey::Beta { layer, member } => {
                let is_gamma = matches!(key, ParamKey::Gamma { .. });
                let bank = self
                    .blocks
                    .get_mut(layer)
                    .and_then(|b| b.norm.as_mut())
                    .ok_or(Error::Index {
                        index: layer,
                        limit: n,
                    })?;
                match (bank, member) {
                    (NormBank::Sequential(v), Some(m)) => {
                        let limit = v.len();
                        let p = v.get_mut(m).ok_or(Error::Index { index: m, limit })?;
                        Ok(if is_gamma { &mut p.gamma } else { &mut p.beta })
                    }
                    (NormBank::Parallel(e), None) => {
                        Ok(if is_gamma { &mut e.gamma } else { &mut e.beta })
                    }
                    _ => Err(Error::Mode(format!(
                        "{key:?} does not match the bank layout"
                    ))),
                }
            }
        }
    }

    pub fn param(&self, key: ParamKey) -> Result<&Tensor> {
        let n = self.blocks.len();
        let linear = |l: usize| -> Result<&LinearLayer> {
            if l == n {
                Ok(&self.head)
            } else {
                self.blocks.get(l).map(|b| &b.linear).ok_or(Error::Index {
                    index: l,
                    limit: n + 1,
                })
            }
        };
        match key {
            ParamKey::Weight(l) => Ok(&linear(l)?.weight),
            ParamKey::Bias(l) => Ok(&linear(l)?.bias),
            ParamKey::Gamma { layer, member } | ParamKey::Beta { layer, member } => {
                let is_gamma = matches!(key, ParamKey::Gamma { .. });
                let bank =
                    self.blocks
                        .get(layer)
                        .and_then(|b| b.norm.as_ref())
                        .ok_or(Error::Index {
                            index: layer,
                            limit: n,
                        })?;
                match (bank, member) {
                    (NormBank::Sequential(v), Some(m)) => {
                        let p = v.get(m).ok_or(Error::Index {
                            index: m,
                            limit: v.len(),
                        })?;
                        Ok(if is_gamma { &p.gamma } else { &p.beta })
                    }
                    (NormBank::Parallel(e), None) => Ok(if is_gamma { &e.gamma } else { &e.beta }),
                    _ => Err(Error::Mode(format!(
                        "{key:?} does not match the bank layout"
                    ))),
                }
            }
        }
    }
}

fn stack_members(outs: &[Tensor]) -> Result<Tensor> {
    let first = outs
        .first()
        .ok_or_else(|| Error::Degenerate("no member outputs".into()))?;
    let mut shape = vec![outs.len()];
    shape.extend_from_slice(first.shape());
    let flat = Tensor::concat_leading(outs)?;
    flat.into_shape(&shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(members: usize, widths: &[usize], seed: u64) -> TinyDeModel {
        TinyDeModel::new(
            ModelSpec::mlp(3, widths, 2, members, Task::Regression),
            seed,
        )
        .unwrap()
    }

    fn batch() -> Tensor {
        Tensor::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.0, -0.5], [-0.3, 0.7, 0.1]]).unwrap()
    }

    /// Plain MLP evaluation with the given norms, written independently of the
    /// model's forward code.
    fn plain_forward(linears: &[&LinearLayer], norms: &[NormParams], x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let hidden = linears.len() - 1;
        for (l, lin) in linears.iter().enumerate() {
            let mut out = Tensor::zeros(&[h.dim(0), lin.out_features()]);
            for i in 0..h.dim(0) {
                for o in 0..lin.out_features() {
                    let mut acc = lin.bias.data()[o];
                    for k in 0..lin.in_features() {
                        acc += h.at(&[i, k]) * lin.weight.at(&[o, k]);
                    }
                    out.set(&[i, o], acc);
                }
            }
            if l < hidden {
                let p = &norms[l];
                for i in 0..out.dim(0) {
                    for j in 0..out.dim(1) {
                        let v = (out.at(&[i, j]) - p.running_mean.data()[j])
                            / (p.running_var.data()[j] + p.eps).sqrt()
                            * p.gamma.data()[j]
                            + p.beta.data()[j];
                        out.set(&[i, j], v.clamp(0.0, 6.0));
                    }
                }
            }
            h = out;
        }
        h
    }

    #[test]
    fn counters_wrap_modulo_members() {
        let mut m = model(5, &[4, 4], 0);
        for _ in 0..4 {
            m.advance_counters();
        }
        assert_eq!(m.counters(), &[4, 4]);
        m.advance_counters();
        assert_eq!(m.counters(), &[0, 0]);
        m.advance_counters();
        assert_eq!(m.counters(), &[1, 1]);
        for _ in 0..5 {
            m.advance_counters();
        }
        assert_eq!(m.counters(), &[1, 1]);
    }

    #[test]
    fn member_zero_matches_plain_network() {
        let mut m = model(3, &[4, 5], 1);
        let x = batch();
        let got = m.forward_member(&x, Phase::Eval).unwrap();
        let (lin, norms) = m.member_view(0).unwrap();
        let want = plain_forward(&lin, &norms, &x);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn constant_last_norm_fixes_output() {
        let mut m = model(2, &[4, 3], 2);
        let c0 = [0.5, 7.0, -1.0];
        if let Some(NormBank::Sequential(v)) = &mut m.blocks_mut()[1].norm {
            v[0].gamma = Tensor::zeros(&[3]);
            v[0].beta = Tensor::vector(c0.to_vec());
        }
        let act: Vec<f64> = c0.iter().map(|v| v.clamp(0.0, 6.0)).collect();
        let head = m.head().clone();
        let mut want = Vec::new();
        for o in 0..2 {
            let mut acc = head.bias.data()[o];
            for (k, a) in act.iter().enumerate() {
                acc += a * head.weight.at(&[o, k]);
            }
            want.push(acc);
        }
        let out = m.forward_member(&batch(), Phase::Eval).unwrap();
        for i in 0..3 {
            for (o, w) in want.iter().enumerate() {
                assert!((out.at(&[i, o]) - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_member_ignores_counter_state() {
        let mut m = model(1, &[4], 3);
        let a = m.forward_member(&batch(), Phase::Eval).unwrap();
        m.advance_counters();
        let b = m.forward_member(&batch(), Phase::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            m.forward_all_sequential(&batch(), Phase::Eval)
                .unwrap()
                .shape(),
            &[1, 3, 2]
        );
    }

    #[test]
    fn identical_members_give_identical_outputs() {
        let mut m = model(4, &[4, 4], 4);
        let out = m.forward_all_sequential(&batch(), Phase::Eval).unwrap();
        let first = out.slice_leading(0, 1).unwrap();
        for k in 1..4 {
            assert_eq!(out.slice_leading(k, k + 1).unwrap(), first);
        }
        assert_eq!(m.counters(), &[0, 0]);
    }

    #[test]
    fn mode_errors() {
        let mut m = model(2, &[4], 5);
        assert!(matches!(
            m.forward_parallel(&batch(), Phase::Eval),
            Err(Error::Mode(_))
        ));
        let mut p = m.to_parallel().unwrap();
        assert!(matches!(
            p.forward_member(&batch(), Phase::Eval),
            Err(Error::Mode(_))
        ));
    }

    #[test]
    fn mode_conversion_round_trip() {
        let mut m = model(3, &[4, 4], 6);
        if let Some(NormBank::Sequential(v)) = &mut m.blocks_mut()[0].norm {
            v[2].gamma = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
            v[1].running_var = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
        }
        let back = m.clone().to_parallel().unwrap().to_sequential();
        assert_eq!(back, m);
        let p = m.clone().to_parallel().unwrap();
        assert_eq!(p.clone().to_sequential().to_parallel().unwrap(), p);
    }

    #[test]
    fn reinit_touches_only_one_member() {
        let mut m = model(3, &[4], 7);
        if let Some(NormBank::Sequential(v)) = &mut m.blocks_mut()[0].norm {
            for p in v.iter_mut() {
                p.gamma = Tensor::vector(vec![2.0; 4]);
            }
        }
        let before = m.clone();
        m.reinit_norm_member(1).unwrap();
        let bank = m.blocks()[0].norm.as_ref().unwrap();
        let old = before.blocks()[0].norm.as_ref().unwrap();
        assert_eq!(bank.member(0).unwrap(), old.member(0).unwrap());
        assert_eq!(bank.member(2).unwrap(), old.member(2).unwrap());
        assert_eq!(bank.member(1).unwrap(), NormParams::new(4, NormKind::Batch));
        assert!(matches!(m.reinit_norm_member(3), Err(Error::Index { .. })));
    }

    #[test]
    fn jitter_is_seeded_and_local() {
        let mut a = model(3, &[4, 3], 1);
        let before = a.clone();
        a.jitter_norm_member(2, 0.1, 9).unwrap();
        let mut b = before.clone();
        b.jitter_norm_member(2, 0.1, 9).unwrap();
        assert_eq!(a, b);
        for (new, old) in a.blocks().iter().zip(before.blocks()) {
            let (n, o) = (new.norm.as_ref().unwrap(), old.norm.as_ref().unwrap());
            assert_eq!(n.member(0).unwrap(), o.member(0).unwrap());
            assert_eq!(n.member(1).unwrap(), o.member(1).unwrap());
            assert_ne!(n.member(2).unwrap().gamma, o.member(2).unwrap().gamma);
            assert_eq!(
                n.member(2).unwrap().running_var,
                o.member(2).unwrap().running_var
            );
        }
    }

    #[test]
    fn members_share_linear_storage() {
        let m = model(4, &[6, 5], 8);
        let (l0, _) = m.member_view(0).unwrap();
        for k in 1..4 {
            let (lk, _) = m.member_view(k).unwrap();
            for (a, b) in l0.iter().zip(&lk) {
                assert!(std::ptr::eq(*a, *b));
            }
        }
        let single = model(1, &[6, 5], 8);
        assert_eq!(m.shared_param_count(), single.shared_param_count());
    }

    #[test]
    fn predict_averages() {
        let mut m = model(1, &[4], 9);
        let p = m.predict(&batch()).unwrap();
        assert_eq!(p.mean.reshape(&[1, 3, 2]).unwrap(), p.samples);

        let spec = ModelSpec::mlp(3, &[4], 2, 1, Task::Classification);
        let mut c = TinyDeModel::new(spec, 9).unwrap();
        let p = c.predict(&batch()).unwrap();
        for i in 0..3 {
            let s: f64 = p.mean.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
