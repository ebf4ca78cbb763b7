//! `RCPT` checkpoint files.
//!
//! Layout (little-endian): magic `RCPT`, `u32` version, `u32` architecture tag,
//! the model configuration (integers as `u32`, dropout as `f64`), a shape
//! table of named tensors, the `f32` payload of every tensor in table order,
//! and a CRC32 of all preceding bytes.
//! Normalization statistics, when present, are stored as extra tensors named
//! `norm.*` after the model parameters.

use std::fs;
use std::path::Path;

use super::layers::Activation;
use super::model::{Arch, ModelConfig, Param, ReconstructionModel};
use crate::embstore::{check_magic, ByteReader, NormStats};
use crate::error::{Error, Result};

pub const RCPT_MAGIC: &[u8; 4] = b"RCPT";
pub const RCPT_VERSION: u32 = 1;

const NORM_NAMES: [&str; 4] = ["norm.pre_mean", "norm.pre_std", "norm.post_mean", "norm.post_std"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ReconstructionModel,
    pub norms: Option<NormStats>,
}

/// One entry of the shape table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::DimMismatch(format!("value {v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &ReconstructionModel, norms: Option<&NormStats>) -> Result<Vec<u8>> {
    let c = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(RCPT_MAGIC);
    buf.extend_from_slice(&RCPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&c.arch.tag().to_le_bytes());
    for v in [c.d_in, c.d_out, c.s_in, c.s_out] {
        put_u32(&mut buf, v)?;
    }
    buf.extend_from_slice(&c.activation.tag().to_le_bytes());
    buf.extend_from_slice(&c.dropout.to_le_bytes());
    for v in [c.width, c.layers, c.heads, c.ff_dim, c.hidden.len()] {
        put_u32(&mut buf, v)?;
    }
    for &h in &c.hidden {
        put_u32(&mut buf, h)?;
    }

    let mut tensors: Vec<(&str, Vec<usize>, &[f64])> = model
        .params()
        .iter()
        .map(|p| (p.name.as_str(), p.shape.clone(), p.data.as_slice()))
        .collect();
    if let Some(n) = norms {
        for (name, v) in NORM_NAMES
            .iter()
            .zip([&n.pre_mean, &n.pre_std, &n.post_mean, &n.post_std])
        {
            tensors.push((name, vec![v.len()], v.as_slice()));
        }
    }
    put_u32(&mut buf, tensors.len())?;
    for (name, shape, _) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, shape.len())?;
        for &d in shape {
            put_u32(&mut buf, d)?;
        }
    }
    for (_, _, data) in &tensors {
        for &v in *data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save_model(model: &ReconstructionModel, norms: Option<&NormStats>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, norms)?;
    fs::write(path, bytes).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn read_header(r: &mut ByteReader<'_>) -> Result<(ModelConfig, Vec<TensorInfo>)> {
    check_magic(r, RCPT_MAGIC)?;
    let offset = r.offset();
    let version = r.u32()?;
    if version != RCPT_VERSION {
        return Err(Error::VersionMismatch {
            expected: RCPT_VERSION,
            found: version,
            offset,
        });
    }
    let tag = r.u32()?;
    let arch = Arch::from_tag(tag).ok_or_else(|| Error::Parse(format!("unknown architecture tag {tag}")))?;
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let tag = r.u32()?;
    let activation = Activation::from_tag(tag).ok_or_else(|| Error::Parse(format!("unknown activation tag {tag}")))?;
    let dropout = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let mut seq = [0usize; 5];
    for d in seq.iter_mut() {
        *d = r.u32()? as usize;
    }
    let [width, layers, heads, ff_dim, n_hidden] = seq;
    let hidden = (0..n_hidden)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let [d_in, d_out, s_in, s_out] = dims;
    let config = ModelConfig {
        arch,
        d_in,
        d_out,
        s_in,
        s_out,
        hidden,
        width,
        layers,
        heads,
        ff_dim,
        activation,
        dropout,
    };

    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let off = r.offset();
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Parse(format!("tensor name at offset {off}: {e}")))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        table.push(TensorInfo { name, shape });
    }
    Ok((config, table))
}

/// Reads only the configuration and shape table.
pub fn read_shape_table(path: impl AsRef<Path>) -> Result<(ModelConfig, Vec<TensorInfo>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    read_header(&mut ByteReader::new(&bytes))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    let (config, table) = read_header(&mut r)?;
    let total: usize = table.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let needed = total as u64 * 4 + 4;
    if (bytes.len() as u64).saturating_sub(r.offset()) < needed {
        return Err(Error::Truncated {
            offset: r.offset(),
            needed,
            available: bytes.len() as u64,
        });
    }
    let mut tensors = Vec::with_capacity(table.len());
    for info in table {
        let data = r.f32_vec(info.shape.iter().product())?;
        tensors.push(Param {
            name: info.name,
            shape: info.shape,
            data: data.into_iter().map(f64::from).collect(),
        });
    }
    r.finish_with_crc()?;

    let norm_start = tensors.iter().position(|t| t.name.starts_with("norm."));
    let norms = match norm_start {
        None => None,
        Some(i) => {
            let extra: Vec<Param> = tensors.split_off(i);
            let names: Vec<&str> = extra.iter().map(|t| t.name.as_str()).collect();
            if names != NORM_NAMES {
                return Err(Error::DimMismatch(format!(
                    "unexpected normalization tensors {names:?}"
                )));
            }
            let mut it = extra.into_iter().map(|t| t.data);
            Some(NormStats {
                pre_mean: it.next().unwrap(),
                pre_std: it.next().unwrap(),
                post_mean: it.next().unwrap(),
                post_std: it.next().unwrap(),
            })
        }
    };
    if let Some(n) = &norms {
        if n.pre_mean.len() != config.d_out || n.post_mean.len() != config.d_in {
            return Err(Error::DimMismatch(format!(
                "normalization stats {}/{} do not match model widths {}/{}",
                n.pre_mean.len(),
                n.post_mean.len(),
                config.d_out,
                config.d_in
            )));
        }
    }
    let model = ReconstructionModel::from_params(config, tensors)?;
    Ok(Checkpoint { model, norms })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
