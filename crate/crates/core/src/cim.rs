//! Behavioral model of sequential Tiny-DE inference on a compute-in-memory
//! accelerator.
//!
//! Per weight layer and pass: DAC-quantize the input, multiply in the
//! crossbar, ADC-quantize the result, let the router pick the member's
//! normalization parameters from the counter's control bits, normalize and
//! activate at full precision. Counters advance once per member pass.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ensemble::{Mode, NormBank, TinyDeModel};
use crate::error::{Error, Result};
use crate::layers::{relu6_forward, LinearLayer, NormParams};
use crate::tensor::Tensor;

/// Default clip quantile for calibration.
pub const CLIP_QUANTILE: f64 = 0.999;
const MAX_BITS: u32 = 52;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PrecisionRepr", into = "PrecisionRepr")]
pub enum Precision {
    Ideal,
    Bits(u32),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PrecisionRepr {
    Bits(u32),
    Word(String),
}

impl TryFrom<PrecisionRepr> for Precision {
    type Error = String;

    fn try_from(r: PrecisionRepr) -> std::result::Result<Self, String> {
        match r {
            PrecisionRepr::Bits(b) => Ok(Precision::Bits(b)),
            PrecisionRepr::Word(w) if w == "ideal" => Ok(Precision::Ideal),
            PrecisionRepr::Word(w) => Err(format!(
                "precision must be a bit count or \"ideal\", got `{w}`"
            )),
        }
    }
}

impl From<Precision> for PrecisionRepr {
    fn from(p: Precision) -> Self {
        match p {
            Precision::Ideal => PrecisionRepr::Word("ideal".into()),
            Precision::Bits(b) => PrecisionRepr::Bits(b),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Ideal => f.write_str("ideal"),
            Precision::Bits(b) => write!(f, "{b}"),
        }
    }
}

/// One converter: precision and clip range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageQuant {
    pub bits: Precision,
    pub lo: f64,
    pub hi: f64,
}

impl StageQuant {
    pub const IDEAL: StageQuant = StageQuant {
        bits: Precision::Ideal,
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub fn validate(&self) -> Result<()> {
        if let Precision::Bits(b) = self.bits {
            if !(1..=MAX_BITS).contains(&b) {
                return Err(Error::Config(format!(
                    "converter bits must be in 1..={MAX_BITS}, got {b}"
                )));
            }
            if !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
                return Err(Error::Config(format!(
                    "clip range [{}, {}] must be finite with hi > lo",
                    self.lo, self.hi
                )));
            }
        }
        Ok(())
    }

    /// Width of one quantization level.
    pub fn step(&self) -> f64 {
        match self.bits {
            Precision::Ideal => 0.0,
            Precision::Bits(b) => (self.hi - self.lo) / 2f64.powi(b as i32),
        }
    }

    /// Clip, then mid-rise uniform quantization.
    pub fn apply(&self, v: f64) -> f64 {
        match self.bits {
            Precision::Ideal => v,
            Precision::Bits(b) => {
                let levels = 2f64.powi(b as i32);
                let delta = (self.hi - self.lo) / levels;
                let k = ((v - self.lo) / delta).floor().clamp(0.0, levels - 1.0);
                self.lo + (k + 0.5) * delta
            }
        }
    }
}

pub fn quantize(x: &Tensor, stage: &StageQuant) -> Tensor {
    x.map_fn(|v| stage.apply(v))
}

/// Converters around one weight layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub dac: StageQuant,
    pub adc: StageQuant,
}

/// Converter settings for every weight layer, head last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub layers: Vec<LayerQuant>,
}

impl QuantSpec {
    pub fn ideal(weight_layers: usize) -> Self {
        QuantSpec {
            layers: vec![
                LayerQuant {
                    dac: StageQuant::IDEAL,
                    adc: StageQuant::IDEAL,
                };
                weight_layers
            ],
        }
    }

    /// Clip ranges from the `1 - quantile` and `quantile` activation
    /// quantiles of all member passes over `x` at full precision.
    pub fn calibrate(
        model: &TinyDeModel,
        x: &Tensor,
        dac: Precision,
        adc: Precision,
        quantile: f64,
    ) -> Result<Self> {
        if !(0.5..=1.0).contains(&quantile) {
            return Err(Error::Config("clip quantile must be in [0.5, 1]".into()));
        }
        let n = model.linears().len();
        let mut inputs: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut outputs: Vec<Vec<f64>> = vec![Vec::new(); n];
        let ideal = QuantSpec::ideal(n);
        for m in 0..model.members() {
            member_pass(model, x, m, &ideal, |layer, input, output| {
                inputs[layer].extend_from_slice(input.data());
                outputs[layer].extend_from_slice(output.data());
            })?;
        }
        let range = |v: &mut Vec<f64>, bits: Precision| -> Result<StageQuant> {
            if v.is_empty() {
                return Err(Error::Degenerate("empty calibration batch".into()));
            }
            v.sort_by(f64::total_cmp);
            let at = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
            let (lo, mut hi) = (at(1.0 - quantile), at(quantile));
            if hi <= lo {
                hi = lo + 1e-6 * lo.abs().max(1.0);
            }
            Ok(StageQuant { bits, lo, hi })
        };
        let mut layers = Vec::with_capacity(n);
        for l in 0..n {
            layers.push(LayerQuant {
                dac: range(&mut inputs[l], dac)?,
                adc: range(&mut outputs[l], adc)?,
            });
        }
        Ok(QuantSpec { layers })
    }

    /// Same clip ranges, new converter precisions.
    pub fn with_bits(&self, dac: Precision, adc: Precision) -> Self {
        QuantSpec {
            layers: self
                .layers
                .iter()
                .map(|l| LayerQuant {
                    dac: StageQuant { bits: dac, ..l.dac },
                    adc: StageQuant { bits: adc, ..l.adc },
                })
                .collect(),
        }
    }

    pub fn validate(&self, weight_layers: usize) -> Result<()> {
        if self.layers.len() != weight_layers {
            return Err(Error::Config(format!(
                "quantization spec covers {} weight layers, model has {weight_layers}",
                self.layers.len()
            )));
        }
        for l in &self.layers {
            l.dac.validate()?;
            l.adc.validate()?;
        }
        Ok(())
    }
}

/// Big-endian `q`-bit representation of `c`.
pub fn binary_control(c: usize, q: u32) -> Result<String> {
    if q == 0 || q > usize::BITS - 1 || c >= 1usize << q {
        return Err(Error::Value(format!(
            "counter {c} does not fit in {q} control bits"
        )));
    }
    Ok((0..q)
        .rev()
        .map(|b| if (c >> b) & 1 == 1 { '1' } else { '0' })
        .collect())
}

/// Inverse of [`binary_control`].
pub fn parse_control(bits: &str) -> Result<usize> {
    if bits.is_empty() || bits.len() >= usize::BITS as usize {
        return Err(Error::Value(format!("`{bits}` is not a control word")));
    }
    bits.chars().try_fold(0usize, |acc, ch| match ch {
        '0' => Ok(acc << 1),
        '1' => Ok((acc << 1) | 1),
        _ => Err(Error::Value(format!("`{bits}` is not a control word"))),
    })
}

/// Smallest control width addressing `members` paths.
pub fn control_bits_for(members: usize) -> u32 {
    (usize::BITS - members.saturating_sub(1).leading_zeros()).max(1)
}

/// Counter and DeMux of one normalization position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouterState {
    pub q: u32,
    pub c: usize,
    members: usize,
}

impl RouterState {
    pub fn new(members: usize, q: u32) -> Result<Self> {
        if members == 0 || q == 0 || q > 16 || members > 1usize << q {
            return Err(Error::Config(format!(
                "{members} members cannot be routed with {q} control bits"
            )));
        }
        Ok(RouterState { q, c: 0, members })
    }

    pub fn control(&self) -> String {
        binary_control(self.c, self.q).expect("counter below 2^q")
    }

    /// Member index decoded from the control bits.
    pub fn select(&self) -> usize {
        parse_control(&self.control()).expect("well-formed control word")
    }

    pub fn advance(&mut self) {
        self.c = (self.c + 1) % self.members;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub pass: usize,
    /// Index among normalized positions.
    pub layer: usize,
    pub counter: usize,
    pub control: String,
    pub member: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CimRun {
    /// `[M, B, K]`
    pub outputs: Tensor,
    pub trace: Vec<TraceRecord>,
}

impl CimRun {
    /// Newline-delimited routing log.
    pub fn write_trace<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.trace {
            writeln!(
                w,
                "pass={} layer={} counter={} control={} member={}",
                t.pass, t.layer, t.counter, t.control, t.member
            )
            .map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }
}

fn norm_member(bank: &NormBank, m: usize) -> Result<NormParams> {
    bank.member(m)
}

fn crossbar(linear: &LinearLayer, x: &Tensor, q: &LayerQuant) -> Result<(Tensor, Tensor)> {
    let input = quantize(x, &q.dac);
    let out = quantize(&linear.apply(&input)?, &q.adc);
    Ok((input, out))
}

/// One member pass; `observe(layer, dac_output, adc_output)` sees every
/// weight layer.
fn member_pass(
    model: &TinyDeModel,
    x: &Tensor,
    m: usize,
    quant: &QuantSpec,
    mut observe: impl FnMut(usize, &Tensor, &Tensor),
) -> Result<Tensor> {
    let mut h = x.clone();
    for (l, block) in model.blocks().iter().enumerate() {
        let (input, z) = crossbar(&block.linear, &h, &quant.layers[l])?;
        observe(l, &input, &z);
        h = match &block.norm {
            Some(bank) => norm_member(bank, m)?.forward_eval(&z)?.0,
            None => z,
        };
        h = relu6_forward(&h).0;
    }
    let l = model.blocks().len();
    let (input, out) = crossbar(model.head(), &h, &quant.layers[l])?;
    observe(l, &input, &out);
    Ok(out)
}

/// `M` routed passes over `x`. `control_bits` defaults to the smallest
/// width that addresses every member.
pub fn run_sequential_inference(
    model: &TinyDeModel,
    x: &Tensor,
    quant: &QuantSpec,
    control_bits: Option<u32>,
) -> Result<CimRun> {
    if model.mode() != Mode::Sequential {
        return Err(Error::Mode(
            "the simulator routes a sequential model".into(),
        ));
    }
    let members = model.members();
    let weight_layers = model.linears().len();
    quant.validate(weight_layers)?;
    let q = control_bits.unwrap_or_else(|| control_bits_for(members));
    let banks = model.blocks().iter().filter(|b| b.norm.is_some()).count();
    let mut routers = vec![RouterState::new(members, q)?; banks];

    let mut outs = Vec::with_capacity(members);
    let mut trace = Vec::new();
    for pass in 0..members {
        let mut h = x.clone();
        let mut bank_idx = 0;
        for (l, block) in model.blocks().iter().enumerate() {
            let (_, z) = crossbar(&block.linear, &h, &quant.layers[l])?;
            h = match &block.norm {
                Some(bank) => {
                    let router = &routers[bank_idx];
                    let member = router.select();
                    if member >= members {
                        return Err(Error::State(format!(
                            "router selected member {member} of {members}"
                        )));
                    }
                    trace.push(TraceRecord {
                        pass,
                        layer: bank_idx,
                        counter: router.c,
                        control: router.control(),
                        member,
                    });
                    bank_idx += 1;
                    norm_member(bank, member)?.forward_eval(&z)?.0
                }
                None => z,
            };
            h = relu6_forward(&h).0;
        }
        let (_, out) = crossbar(model.head(), &h, &quant.layers[weight_layers - 1])?;
        outs.push(out);
        routers.iter_mut().for_each(RouterState::advance);
    }
    let b = x.dim(0);
    let k = model.spec().output_dim;
    Ok(CimRun {
        outputs: Tensor::concat_leading(&outs)?.into_shape(&[members, b, k])?,
        trace,
    })
}
