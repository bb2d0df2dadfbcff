//! RACW checkpoints.
//!
//! Layout (little-endian):
//! - magic `b"RACW"`, u32 version (= 1), u32 tensor_count
//! - per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank],
//!   f32 data row-major
//!
//! Model tensors use the names from [`ModelParams::named`]. The model
//! configuration travels alongside them as small `meta.*` tensors so a
//! checkpoint is self-describing:
//!
//! | name                  | contents                                          |
//! |-----------------------|---------------------------------------------------|
//! | `meta.num_frames`     | `[N]`                                             |
//! | `meta.scales`         | window sizes, e.g. `[1, 4, 8]`                    |
//! | `meta.correlation_mode` | `[0]` attention, `[1]` TSM                      |
//! | `meta.dims`           | grid S1, S2, d_f, d_e, H, d_p, H_p, d_ff, C_f, layers, positional encoding (0/1) |

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::{CorrelationMode, ModelConfig, ModelDims};
use crate::model::{Model, ModelParams};
use crate::sampling::Scale;
use crate::{Error, Result};

pub const RACW_MAGIC: &[u8; 4] = b"RACW";
pub const RACW_VERSION: u32 = 1;

/// One serialized tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_tensors(w: &mut impl Write, tensors: &[RawTensor]) -> Result<()> {
    w.write_all(RACW_MAGIC)?;
    w.write_all(&RACW_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
        let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Format(format!("rank too large: {}", t.name)))?;
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::shape(format!("tensor {} data does not match its shape", t.name)));
        }
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[rank])?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact_fmt(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("RACW file truncated".into()),
        _ => Error::Io(e),
    })
}

pub fn read_tensors(r: &mut impl Read) -> Result<Vec<RawTensor>> {
    let mut magic = [0u8; 4];
    read_exact_fmt(r, &mut magic)?;
    if &magic != RACW_MAGIC {
        return Err(Error::Format("not a RACW file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    read_exact_fmt(r, &mut word)?;
    let version = u32::from_le_bytes(word);
    if version != RACW_VERSION {
        return Err(Error::Format(format!("unsupported RACW version {version}")));
    }
    read_exact_fmt(r, &mut word)?;
    let count = u32::from_le_bytes(word);
    let mut out = Vec::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact_fmt(r, &mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact_fmt(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact_fmt(r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            read_exact_fmt(r, &mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} dims overflow")))?;
        let mut bytes = vec![0u8; numel * 4];
        read_exact_fmt(r, &mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(RawTensor { name, shape, data });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after RACW payload".into()));
    }
    Ok(out)
}

fn meta(name: &str, values: Vec<f32>) -> RawTensor {
    RawTensor { name: format!("meta.{name}"), shape: vec![values.len()], data: values }
}

/// Serializes a model: `meta.*` tensors first, then parameters in
/// [`ModelParams::named`] order.
pub fn model_tensors(model: &Model) -> Vec<RawTensor> {
    let c = &model.config;
    let d = &c.dims;
    let mode = match c.correlation_mode {
        CorrelationMode::Attention => 0.0,
        CorrelationMode::Tsm => 1.0,
    };
    let dims = [
        d.grid.0,
        d.grid.1,
        d.feature_dim,
        d.embed_dim,
        d.heads,
        d.predictor_dim,
        d.predictor_heads,
        d.ff_dim,
        d.fusion_channels,
        d.predictor_layers,
        d.positional_encoding as usize,
    ];
    let mut out = vec![
        meta("num_frames", vec![c.num_frames as f32]),
        meta("scales", c.scales.iter().map(|s| s.window() as f32).collect()),
        meta("correlation_mode", vec![mode]),
        meta("dims", dims.iter().map(|&v| v as f32).collect()),
    ];
    for t in model.params.named(c) {
        out.push(RawTensor {
            name: t.name,
            shape: t.view.shape().to_vec(),
            data: t.view.iter().map(|&v| v as f32).collect(),
        });
    }
    out
}

fn meta_ints(map: &HashMap<&str, &RawTensor>, name: &str) -> Result<Vec<usize>> {
    let t = map.get(name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
    t.data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("{name} holds non-integer {v}")))
            }
        })
        .collect()
}

/// Rebuilds a model from tensors written by [`model_tensors`].
pub fn model_from_tensors(tensors: &[RawTensor]) -> Result<Model> {
    let map: HashMap<&str, &RawTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    if map.len() != tensors.len() {
        return Err(Error::Format("duplicate tensor names in checkpoint".into()));
    }
    let num_frames = *meta_ints(&map, "meta.num_frames")?.first().ok_or_else(|| Error::Format("empty meta.num_frames".into()))?;
    let scales = meta_ints(&map, "meta.scales")?.into_iter().map(Scale::from_window).collect::<Result<Vec<_>>>()?;
    let correlation_mode = match meta_ints(&map, "meta.correlation_mode")?.as_slice() {
        [0] => CorrelationMode::Attention,
        [1] => CorrelationMode::Tsm,
        other => return Err(Error::Format(format!("bad meta.correlation_mode {other:?}"))),
    };
    let d = meta_ints(&map, "meta.dims")?;
    if d.len() != 11 || d[10] > 1 {
        return Err(Error::Format("meta.dims must hold 11 entries".into()));
    }
    let dims = ModelDims {
        grid: (d[0], d[1]),
        feature_dim: d[2],
        embed_dim: d[3],
        heads: d[4],
        predictor_dim: d[5],
        predictor_heads: d[6],
        ff_dim: d[7],
        fusion_channels: d[8],
        predictor_layers: d[9],
        positional_encoding: d[10] == 1,
    };
    let config = ModelConfig { num_frames, scales, correlation_mode, dims };
    config.validate().map_err(|e| Error::Format(format!("checkpoint config invalid: {e}")))?;

    let mut params = ModelParams::zeros(&config);
    let mut used = 4;
    for mut slot in params.named_mut(&config) {
        let t = map.get(slot.name.as_str()).ok_or_else(|| Error::Format(format!("checkpoint lacks {}", slot.name)))?;
        if t.shape != slot.view.shape() {
            return Err(Error::Format(format!("tensor {} has shape {:?}, expected {:?}", t.name, t.shape, slot.view.shape())));
        }
        for (dst, &src) in slot.view.iter_mut().zip(&t.data) {
            *dst = src as f64;
        }
        used += 1;
    }
    if used != tensors.len() {
        return Err(Error::Format("checkpoint holds unexpected tensors".into()));
    }
    Ok(Model { config, params })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensors(&mut f, &model_tensors(model))?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    model_from_tensors(&read_tensors(&mut f)?)
}
