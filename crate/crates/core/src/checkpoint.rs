//! Named-tensor parameter sets and model checkpoints.
//!
//! Binary parameter layout (little endian):
//!
//! ```text
//! "TDEP" | version: u32 | count: u32 |
//!   count x ( name_len: u32 | name: utf8 | rank: u32 | dims: u64 x rank | data: f64 x prod(dims) )
//! ```
//!
//! Binary checkpoints are `"TDEC" | version: u32 | header_len: u32 |
//! header: json | parameters`; JSON checkpoints hold the same header with the
//! parameters inline. Both formats restore every value bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{HiddenBlock, Mode, ModelSpec, NormBank, TinyDeModel};
use crate::error::{Error, Result};
use crate::layers::{EnsembleNormParams, LinearLayer, NormParams};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const PARAM_MAGIC: &[u8; 4] = b"TDEP";
const CKPT_MAGIC: &[u8; 4] = b"TDEC";
const JSON_FORMAT: &str = "tinyde-params";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct ParamJson {
    format: String,
    version: u32,
    tensors: Vec<NamedTensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Serde(msg.into())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| bad(format!("truncated input: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_all<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::io("<stream>", e))
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
        Tensor::new(t.shape.clone(), t.data.clone())
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        write_all(&mut w, PARAM_MAGIC)?;
        write_all(&mut w, &FORMAT_VERSION.to_le_bytes())?;
        write_all(&mut w, &(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            write_all(&mut w, &(t.name.len() as u32).to_le_bytes())?;
            write_all(&mut w, t.name.as_bytes())?;
            write_all(&mut w, &(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                write_all(&mut w, &(d as u64).to_le_bytes())?;
            }
            for &v in &t.data {
                write_all(&mut w, &v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != PARAM_MAGIC {
            return Err(bad("not a parameter file"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported parameter format version {version}"
            )));
        }
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad("tensor too large"))?;
            let mut bytes = vec![0u8; n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?];
            read_exact(&mut r, &mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(ParamSet { tensors })
    }

    pub fn to_json(&self) -> Result<String> {
        if self
            .tensors
            .iter()
            .any(|t| t.data.iter().any(|v| !v.is_finite()))
        {
            return Err(bad("JSON cannot carry non-finite values"));
        }
        let doc = ParamJson {
            format: JSON_FORMAT.into(),
            version: FORMAT_VERSION,
            tensors: self.tensors.clone(),
        };
        serde_json::to_string(&doc).map_err(|e| bad(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ParamJson = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if doc.format != JSON_FORMAT || doc.version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported parameter document {} v{}",
                doc.format, doc.version
            )));
        }
        Ok(ParamSet {
            tensors: doc.tensors,
        })
    }
}

/// Header of a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub spec: ModelSpec,
    pub mode: Mode,
    pub frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    header: CheckpointHeader,
    params: ParamJson,
}

const NORM_FIELDS: [&str; 4] = ["gamma", "beta", "running_mean", "running_var"];

fn norm_fields(p: &NormParams) -> [&Tensor; 4] {
    [&p.gamma, &p.beta, &p.running_mean, &p.running_var]
}

fn ens_fields(p: &EnsembleNormParams) -> [&Tensor; 4] {
    [&p.gamma, &p.beta, &p.running_mean, &p.running_var]
}

/// All parameters and running statistics of a model.
pub fn model_params(model: &TinyDeModel) -> ParamSet {
    let mut ps = ParamSet::default();
    for (l, b) in model.blocks().iter().enumerate() {
        ps.push(format!("block{l}.weight"), &b.linear.weight);
        ps.push(format!("block{l}.bias"), &b.linear.bias);
        match &b.norm {
            Some(NormBank::Sequential(members)) => {
                for (m, p) in members.iter().enumerate() {
                    for (f, t) in NORM_FIELDS.iter().zip(norm_fields(p)) {
                        ps.push(format!("block{l}.norm.m{m}.{f}"), t);
                    }
                }
            }
            Some(NormBank::Parallel(e)) => {
                for (f, t) in NORM_FIELDS.iter().zip(ens_fields(e)) {
                    ps.push(format!("block{l}.norm.{f}"), t);
                }
            }
            None => {}
        }
    }
    ps.push("head.weight", &model.head().weight);
    ps.push("head.bias", &model.head().bias);
    ps
}

/// Rebuilds a model from its header and parameters.
pub fn model_from_params(header: &CheckpointHeader, ps: &ParamSet) -> Result<TinyDeModel> {
    let spec = &header.spec;
    spec.validate()?;
    let linear = |prefix: &str| -> Result<LinearLayer> {
        let mut l = LinearLayer::new(
            ps.get(&format!("{prefix}.weight"))?,
            ps.get(&format!("{prefix}.bias"))?,
        )?;
        l.frozen = header.frozen;
        Ok(l)
    };
    let mut blocks = Vec::with_capacity(spec.hidden.len());
    for (l, h) in spec.hidden.iter().enumerate() {
        let norm = if !h.normalized {
            None
        } else {
            let fetch = |prefix: String| -> Result<[Tensor; 4]> {
                Ok([
                    ps.get(&format!("{prefix}.gamma"))?,
                    ps.get(&format!("{prefix}.beta"))?,
                    ps.get(&format!("{prefix}.running_mean"))?,
                    ps.get(&format!("{prefix}.running_var"))?,
                ])
            };
            Some(match header.mode {
                Mode::Sequential => {
                    let mut members = Vec::with_capacity(spec.members);
                    for m in 0..spec.members {
                        let [gamma, beta, running_mean, running_var] =
                            fetch(format!("block{l}.norm.m{m}"))?;
                        let p = NormParams {
                            gamma,
                            beta,
                            running_mean,
                            running_var,
                            eps: spec.eps,
                            momentum: spec.momentum,
                            kind: spec.norm_kind,
                        };
                        p.validate()?;
                        members.push(p);
                    }
                    NormBank::Sequential(members)
                }
                Mode::Parallel => {
                    let [gamma, beta, running_mean, running_var] = fetch(format!("block{l}.norm"))?;
                    let mut e = EnsembleNormParams::new(spec.members, h.width, spec.norm_kind);
                    for (dst, src) in [
                        (&mut e.gamma, gamma),
                        (&mut e.beta, beta),
                        (&mut e.running_mean, running_mean),
                        (&mut e.running_var, running_var),
                    ] {
                        if dst.shape() != src.shape() {
                            return Err(Error::dim(
                                "ensemble norm parameter",
                                src.shape(),
                                dst.shape(),
                            ));
                        }
                        *dst = src;
                    }
                    e.eps = spec.eps;
                    e.momentum = spec.momentum;
                    NormBank::Parallel(e)
                }
            })
        };
        blocks.push(HiddenBlock {
            linear: linear(&format!("block{l}"))?,
            norm,
        });
    }
    TinyDeModel::from_parts(spec.clone(), blocks, linear("head")?, header.mode)
}

fn header_of(model: &TinyDeModel) -> CheckpointHeader {
    CheckpointHeader {
        version: FORMAT_VERSION,
        spec: model.spec().clone(),
        mode: model.mode(),
        frozen: model.is_frozen(),
    }
}

pub fn write_checkpoint_binary<W: Write>(model: &TinyDeModel, mut w: W) -> Result<()> {
    let header = serde_json::to_vec(&header_of(model)).map_err(|e| bad(e.to_string()))?;
    write_all(&mut w, CKPT_MAGIC)?;
    write_all(&mut w, &FORMAT_VERSION.to_le_bytes())?;
    write_all(&mut w, &(header.len() as u32).to_le_bytes())?;
    write_all(&mut w, &header)?;
    model_params(model).write_binary(w)
}

pub fn read_checkpoint_binary<R: Read>(mut r: R) -> Result<TinyDeModel> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; len];
    read_exact(&mut r, &mut header)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header).map_err(|e| bad(e.to_string()))?;
    let ps = ParamSet::read_binary(r)?;
    model_from_params(&header, &ps)
}

pub fn checkpoint_to_json(model: &TinyDeModel) -> Result<String> {
    let params = model_params(model);
    let doc = CheckpointJson {
        header: header_of(model),
        params: serde_json::from_str(&params.to_json()?).map_err(|e| bad(e.to_string()))?,
    };
    serde_json::to_string_pretty(&doc).map_err(|e| bad(e.to_string()))
}

pub fn checkpoint_from_json(text: &str) -> Result<TinyDeModel> {
    let doc: CheckpointJson = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if doc.header.version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {}",
            doc.header.version
        )));
    }
    let ps = ParamSet {
        tensors: doc.params.tensors,
    };
    model_from_params(&doc.header, &ps)
}

/// `.json` paths as JSON, anything else binary.
pub fn save_checkpoint(model: &TinyDeModel, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        std::fs::write(path, checkpoint_to_json(model)?).map_err(io)
    } else {
        let f = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(f);
        write_checkpoint_binary(model, &mut w)?;
        w.flush().map_err(io)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TinyDeModel> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(CKPT_MAGIC) {
        read_checkpoint_binary(bytes.as_slice())
    } else {
        checkpoint_from_json(
            std::str::from_utf8(&bytes)
                .map_err(|_| bad("checkpoint is neither binary nor UTF-8"))?,
        )
    }
}
