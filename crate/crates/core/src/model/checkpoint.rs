//! Binary checkpoint format.
//!
//! ```text
//! "AFSD"  u32 version  u32 tensor_count
//! per tensor:
//!   u16 name_len  name (UTF-8)  u8 rank  u32 dims[rank]  u8 dtype  data
//! ```
//!
//! Integers are little-endian. dtype 0 is little-endian `f64`, the only one
//! written. Besides the model weights a checkpoint holds `meta.config`
//! (architecture) and, optionally, `adam.meta`, `adam.m.*` and `adam.v.*`.
//! Files are parsed completely before anything is constructed.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use super::{BackboneConfig, FusionMode, Model, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AFSD";
pub const VERSION: u32 = 1;
pub const DTYPE_F64_LE: u8 = 0;

const META_CONFIG: &str = "meta.config";
const ADAM_META: &str = "adam.meta";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("unsupported dtype tag {dtype} for tensor `{name}`")]
    Dtype { name: String, dtype: u8 },
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("shape mismatch for tensor `{name}`: model has {expected:?}, checkpoint has {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

impl CheckpointError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::Io(_) => 1,
            CheckpointError::BadMagic(_) => 2,
            CheckpointError::Version(_) => 3,
            CheckpointError::Truncated(_) => 4,
            CheckpointError::Malformed(_) => 5,
            CheckpointError::Dtype { .. } => 6,
            CheckpointError::UnknownTensor(_) => 7,
            CheckpointError::MissingTensor(_) => 8,
            CheckpointError::ShapeMismatch { .. } => 9,
        }
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Encodes named tensors in the checkpoint layout.
pub fn encode(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(DTYPE_F64_LE);
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint into named tensors, in file order.
pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        if rank > 4 {
            return Err(CheckpointError::Malformed(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64_LE {
            return Err(CheckpointError::Dtype { name, dtype });
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` is too large")))?;
        let raw = r.take(n, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after last tensor",
            buf.len() - r.pos
        )));
    }
    Ok(out)
}

fn config_tensor(cfg: &ModelConfig) -> Tensor {
    // [mode, side_channels, block_count, len_1, widths_1..., len_2, ...]
    let mut v = vec![
        cfg.mode.code() as f64,
        cfg.rgb.side_channels as f64,
        cfg.rgb.blocks.len() as f64,
    ];
    for b in &cfg.rgb.blocks {
        v.push(b.len() as f64);
        v.extend(b.iter().map(|&c| c as f64));
    }
    let n = v.len();
    Tensor::new(&[n], v).expect("rank-1")
}

fn parse_config(t: &Tensor) -> Result<ModelConfig> {
    let bad = || CheckpointError::Malformed("corrupt meta.config".into());
    let v: Vec<usize> = t
        .data()
        .iter()
        .map(|&x| (x >= 0.0 && x.fract() == 0.0 && x < 1e9).then_some(x as usize))
        .collect::<Option<_>>()
        .ok_or_else(bad)?;
    let mode = FusionMode::from_code(*v.first().ok_or_else(bad)? as u8).ok_or_else(bad)?;
    let side = *v.get(1).ok_or_else(bad)?;
    let count = *v.get(2).ok_or_else(bad)?;
    let mut pos = 3;
    let mut blocks = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = *v.get(pos).ok_or_else(bad)?;
        let widths = v.get(pos + 1..pos + 1 + len).ok_or_else(bad)?;
        blocks.push(widths.to_vec());
        pos += 1 + len;
    }
    if pos != v.len() {
        return Err(bad());
    }
    let backbone = |input_channels| BackboneConfig {
        blocks: blocks.clone(),
        input_channels,
        side_channels: side,
    };
    Ok(ModelConfig {
        rgb: backbone(3),
        depth: backbone(1),
        mode,
    })
}

/// Serializes the model (and optimizer state, when given) to bytes.
pub fn to_bytes(model: &Model, adam: Option<&AdamState>) -> Vec<u8> {
    let config = config_tensor(&model.config);
    let mut tensors: Vec<(String, &Tensor)> = vec![(META_CONFIG.to_string(), &config)];
    let named = model.params.named();
    tensors.extend(named.iter().map(|(n, t)| (n.clone(), *t)));
    let adam_meta;
    if let Some(st) = adam {
        let c = st.config;
        adam_meta = Tensor::new(&[5], vec![st.step as f64, c.lr, c.beta1, c.beta2, c.eps]).expect("rank-1");
        tensors.push((ADAM_META.to_string(), &adam_meta));
        for ((name, _), m) in named.iter().zip(&st.m) {
            tensors.push((format!("adam.m.{name}"), m));
        }
        for ((name, _), v) in named.iter().zip(&st.v) {
            tensors.push((format!("adam.v.{name}"), v));
        }
    }
    encode(&tensors)
}

pub fn save(path: impl AsRef<Path>, model: &Model, adam: Option<&AdamState>) -> Result<()> {
    let bytes = to_bytes(model, adam);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

/// Copies checkpoint tensors into `model`, which must have exactly the same
/// parameter names and shapes. Returns the optimizer state if one was stored.
/// `model` is left untouched on error.
pub fn load_into(model: &mut Model, bytes: &[u8]) -> Result<Option<AdamState>> {
    let tensors = decode(bytes)?;
    let mut by_name: HashMap<&str, &Tensor> = HashMap::with_capacity(tensors.len());
    for (n, t) in &tensors {
        if by_name.insert(n.as_str(), t).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor `{n}`")));
        }
    }

    let names: Vec<(String, Vec<usize>)> = model
        .params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for (name, shape) in &names {
        let t = by_name
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                got: t.shape().to_vec(),
            });
        }
    }

    let adam = match by_name.get(ADAM_META) {
        None => None,
        Some(meta) => {
            let d = meta.data();
            if d.len() != 5 || d[0] < 0.0 || d[0].fract() != 0.0 {
                return Err(CheckpointError::Malformed("corrupt adam.meta".into()));
            }
            let mut m = Vec::with_capacity(names.len());
            let mut v = Vec::with_capacity(names.len());
            for (prefix, dst) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                for (name, shape) in &names {
                    let key = format!("{prefix}{name}");
                    let t = by_name
                        .get(key.as_str())
                        .ok_or_else(|| CheckpointError::MissingTensor(key.clone()))?;
                    if t.shape() != shape.as_slice() {
                        return Err(CheckpointError::ShapeMismatch {
                            name: key,
                            expected: shape.clone(),
                            got: t.shape().to_vec(),
                        });
                    }
                    dst.push((*t).clone());
                }
            }
            Some(AdamState {
                config: AdamConfig {
                    lr: d[1],
                    beta1: d[2],
                    beta2: d[3],
                    eps: d[4],
                },
                step: d[0] as u64,
                m,
                v,
            })
        }
    };

    let known = names.len() * if adam.is_some() { 3 } else { 1 } + 1 + usize::from(adam.is_some());
    if by_name.len() != known {
        let param_names: std::collections::HashSet<&str> = names.iter().map(|(n, _)| n.as_str()).collect();
        let unknown = tensors
            .iter()
            .map(|(n, _)| n.as_str())
            .find(|n| {
                *n != META_CONFIG
                    && *n != ADAM_META
                    && !param_names.contains(n)
                    && !n
                        .strip_prefix("adam.m.")
                        .or_else(|| n.strip_prefix("adam.v."))
                        .is_some_and(|p| param_names.contains(p) && adam.is_some())
            })
            .unwrap_or("?");
        return Err(CheckpointError::UnknownTensor(unknown.to_string()));
    }

    model.params.visit_mut(|name, t| {
        *t = by_name[name.as_str()].clone();
    });
    Ok(adam)
}

/// Reconstructs a model (and optimizer state) from checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Option<AdamState>)> {
    let tensors = decode(bytes)?;
    let cfg_t = tensors
        .iter()
        .find(|(n, _)| n == META_CONFIG)
        .map(|(_, t)| t)
        .ok_or_else(|| CheckpointError::MissingTensor(META_CONFIG.into()))?;
    let config = parse_config(cfg_t)?;
    let mut model = Model::build(config, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let adam = load_into(&mut model, bytes)?;
    Ok((model, adam))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, Option<AdamState>)> {
    from_bytes(&fs::read(path)?)
}
