//! Analytic parameter and latency census for ensemble methods.
//!
//! Memory counts every stored number (weights, biases, learnable
//! normalization parameters and running buffers). Latency counts multiply
//! accumulates of one inference, with a batched pass over tiled inputs
//! counted once. Relative figures are exact ratios against the single model.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Linear {
        fan_in: u64,
        fan_out: u64,
    },
    Conv {
        fan_in: u64,
        fan_out: u64,
        kernel_area: u64,
        /// Output positions.
        #[serde(default = "one")]
        spatial: u64,
    },
    Norm {
        channels: u64,
        #[serde(default = "one")]
        spatial: u64,
        /// Batch-statistics variants store a running mean and variance.
        #[serde(default = "yes")]
        running_stats: bool,
    },
    Activation {
        #[serde(default)]
        size: u64,
    },
}

fn one() -> u64 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Replicated per member by the branch ensemble.
    #[serde(default)]
    pub branch: bool,
}

impl LayerEntry {
    pub fn weight_params(&self) -> u64 {
        match self.kind {
            LayerKind::Linear { fan_in, fan_out } => fan_in * fan_out + fan_out,
            LayerKind::Conv {
                fan_in,
                fan_out,
                kernel_area,
                ..
            } => kernel_area * fan_in * fan_out + fan_out,
            _ => 0,
        }
    }

    pub fn norm_learnable(&self) -> u64 {
        match self.kind {
            LayerKind::Norm { channels, .. } => 2 * channels,
            _ => 0,
        }
    }

    pub fn norm_buffers(&self) -> u64 {
        match self.kind {
            LayerKind::Norm {
                channels,
                running_stats: true,
                ..
            } => 2 * channels,
            _ => 0,
        }
    }

    pub fn stored(&self) -> u64 {
        self.weight_params() + self.norm_learnable() + self.norm_buffers()
    }

    /// Multiply-accumulates per sample; a norm costs one per activation.
    pub fn macs(&self) -> u64 {
        match self.kind {
            LayerKind::Linear { fan_in, fan_out } => fan_in * fan_out,
            LayerKind::Conv {
                fan_in,
                fan_out,
                kernel_area,
                spatial,
            } => kernel_area * fan_in * fan_out * spatial,
            LayerKind::Norm {
                channels, spatial, ..
            } => channels * spatial,
            LayerKind::Activation { .. } => 0,
        }
    }

    /// Output activations of a weight layer.
    fn outputs(&self) -> u64 {
        match self.kind {
            LayerKind::Linear { fan_out, .. } => fan_out,
            LayerKind::Conv {
                fan_out, spatial, ..
            } => fan_out * spatial,
            _ => 0,
        }
    }

    /// Size of the two rank-1 factors of one member.
    fn rank1(&self) -> u64 {
        match self.kind {
            LayerKind::Linear { fan_in, fan_out }
            | LayerKind::Conv {
                fan_in, fan_out, ..
            } => fan_in + fan_out,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    #[serde(default)]
    pub name: String,
    pub layers: Vec<LayerEntry>,
}

const RESNET32: &str = include_str!("../data/resnet32.toml");

impl LayerSpec {
    /// ResNet-32 for 32x32 inputs: stem, three stages of five basic blocks
    /// at widths 16/32/64, and a 64->10 classifier. The last block and the
    /// classifier are marked as branch layers.
    pub fn resnet32() -> Self {
        Self::from_toml(RESNET32).expect("bundled spec parses")
    }

    /// Fully connected network `widths[0] -> ... -> widths[n]` with a norm
    /// after every hidden linear layer.
    pub fn mlp(widths: &[u64], running_stats: bool) -> Self {
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            layers.push(LayerEntry {
                kind: LayerKind::Linear {
                    fan_in: w[0],
                    fan_out: w[1],
                },
                branch: false,
            });
            if i + 2 < widths.len() {
                layers.push(LayerEntry {
                    kind: LayerKind::Norm {
                        channels: w[1],
                        spatial: 1,
                        running_stats,
                    },
                    branch: false,
                });
                layers.push(LayerEntry {
                    kind: LayerKind::Activation { size: w[1] },
                    branch: false,
                });
            }
        }
        LayerSpec {
            name: "mlp".into(),
            layers,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// `.json` files as JSON, everything else as TOML.
    pub fn from_path(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text)?,
            _ => Self::from_toml(&text)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("layer spec has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let bad = match l.kind {
                LayerKind::Linear { fan_in, fan_out } => fan_in == 0 || fan_out == 0,
                LayerKind::Conv {
                    fan_in,
                    fan_out,
                    kernel_area,
                    spatial,
                } => fan_in == 0 || fan_out == 0 || kernel_area == 0 || spatial == 0,
                LayerKind::Norm {
                    channels, spatial, ..
                } => channels == 0 || spatial == 0,
                LayerKind::Activation { .. } => false,
            };
            if bad {
                return Err(Error::Config(format!("layer {i} has a zero extent")));
            }
        }
        if self.macs() == 0 {
            return Err(Error::Config("layer spec performs no computation".into()));
        }
        Ok(())
    }

    pub fn weight_params(&self) -> u64 {
        self.layers.iter().map(LayerEntry::weight_params).sum()
    }

    pub fn norm_learnable(&self) -> u64 {
        self.layers.iter().map(LayerEntry::norm_learnable).sum()
    }

    pub fn norm_buffers(&self) -> u64 {
        self.layers.iter().map(LayerEntry::norm_buffers).sum()
    }

    /// Learnable parameters of the single model.
    pub fn learnable_params(&self) -> u64 {
        self.weight_params() + self.norm_learnable()
    }

    /// Stored numbers of the single model.
    pub fn stored(&self) -> u64 {
        self.layers.iter().map(LayerEntry::stored).sum()
    }

    pub fn macs(&self) -> u64 {
        self.layers.iter().map(LayerEntry::macs).sum()
    }

    /// Learnable normalization share of all learnable parameters.
    pub fn norm_share(&self) -> Ratio<u64> {
        Ratio::new(self.norm_learnable(), self.learnable_params())
    }

    /// Share of stored numbers held by branch layers.
    pub fn branch_fraction(&self) -> Ratio<u64> {
        let b: u64 = self
            .layers
            .iter()
            .filter(|l| l.branch)
            .map(LayerEntry::stored)
            .sum();
        Ratio::new(b, self.stored())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Single,
    DeepEnsemble,
    McDropout,
    Batchensemble,
    BranchEnsemble,
    /// Single-shot inference.
    TinyDe,
    TinyDeSequential,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Single,
        Method::DeepEnsemble,
        Method::McDropout,
        Method::Batchensemble,
        Method::BranchEnsemble,
        Method::TinyDe,
        Method::TinyDeSequential,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::DeepEnsemble => "deep_ensemble",
            Method::McDropout => "mc_dropout",
            Method::Batchensemble => "batchensemble",
            Method::BranchEnsemble => "branch_ensemble",
            Method::TinyDe => "tiny_de",
            Method::TinyDeSequential => "tiny_de_sequential",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::Value(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostCensus {
    pub method: Method,
    pub members: u64,
    /// Every stored number.
    pub total_params: u64,
    pub learnable_params: u64,
    /// Learnable normalization parameters over all stored copies.
    pub learnable_norm_params: u64,
    /// Passes through the network head.
    pub forward_pass_count: u64,
    pub macs: u64,
    pub relative_memory: Ratio<u64>,
    pub relative_latency: Ratio<u64>,
}

pub fn census(spec: &LayerSpec, method: Method, members: u64) -> Result<CostCensus> {
    if members == 0 {
        return Err(Error::Value("ensemble size must be at least 1".into()));
    }
    spec.validate()?;
    let m = members;
    let (w, nl, nb, l) = (
        spec.weight_params(),
        spec.norm_learnable(),
        spec.norm_buffers(),
        spec.macs(),
    );
    let extra = m >= 2;

    let (learnable, buffers, norm, passes, macs) = match method {
        Method::Single => (w + nl, nb, nl, 1, l),
        Method::DeepEnsemble => (m * (w + nl), m * nb, m * nl, m, m * l),
        Method::McDropout => (w + nl, nb, nl, m, m * l),
        Method::Batchensemble => {
            let (vecs, acts) = if extra {
                let vecs: u64 = spec.layers.iter().map(|e| m * e.rank1()).sum();
                let acts: u64 = spec.layers.iter().map(|e| 2 * e.outputs()).sum();
                (vecs, acts)
            } else {
                (0, 0)
            };
            (w + nl + vecs, nb, nl, 1, l + acts)
        }
        Method::BranchEnsemble => {
            let part = |branch: bool, f: fn(&LayerEntry) -> u64| -> u64 {
                spec.layers
                    .iter()
                    .filter(|e| e.branch == branch)
                    .map(f)
                    .sum()
            };
            let learn = |e: &LayerEntry| e.weight_params() + e.norm_learnable();
            (
                part(false, learn) + m * part(true, learn),
                part(false, LayerEntry::norm_buffers) + m * part(true, LayerEntry::norm_buffers),
                part(false, LayerEntry::norm_learnable)
                    + m * part(true, LayerEntry::norm_learnable),
                m,
                part(false, LayerEntry::macs) + m * part(true, LayerEntry::macs),
            )
        }
        Method::TinyDe => (w + m * nl, m * nb, m * nl, 1, l),
        Method::TinyDeSequential => (w + m * nl, m * nb, m * nl, m, m * l),
    };
    let total = learnable + buffers;
    Ok(CostCensus {
        method,
        members,
        total_params: total,
        learnable_params: learnable,
        learnable_norm_params: norm,
        forward_pass_count: passes,
        macs,
        relative_memory: Ratio::new(total, spec.stored()),
        relative_latency: Ratio::new(macs, l),
    })
}

/// Census of every method for every ensemble size, method-major.
pub fn emit_cost_curves(spec: &LayerSpec, members: &[u64]) -> Result<Vec<CostCensus>> {
    let mut rows = Vec::with_capacity(Method::ALL.len() * members.len());
    for method in Method::ALL {
        for &m in members {
            rows.push(census(spec, method, m)?);
        }
    }
    Ok(rows)
}

fn ratio_f64(r: &Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn write_cost_csv<W: Write>(rows: &[CostCensus], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let ser = |e: csv::Error| Error::Serde(e.to_string());
    out.write_record([
        "method",
        "members",
        "total_params",
        "learnable_params",
        "learnable_norm_params",
        "forward_passes",
        "macs",
        "relative_memory",
        "relative_latency",
        "relative_memory_exact",
        "relative_latency_exact",
    ])
    .map_err(ser)?;
    for r in rows {
        out.write_record([
            r.method.id().to_string(),
            r.members.to_string(),
            r.total_params.to_string(),
            r.learnable_params.to_string(),
            r.learnable_norm_params.to_string(),
            r.forward_pass_count.to_string(),
            r.macs.to_string(),
            format!("{:.6}", ratio_f64(&r.relative_memory)),
            format!("{:.6}", ratio_f64(&r.relative_latency)),
            r.relative_memory.to_string(),
            r.relative_latency.to_string(),
        ])
        .map_err(ser)?;
    }
    out.flush().map_err(|e| Error::Serde(e.to_string()))
}
