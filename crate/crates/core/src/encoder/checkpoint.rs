//! Checkpoint container.
//!
//! ```text
//! magic      8 bytes   "KFFNCKPT"
//! version    u32 LE    FORMAT_VERSION
//! header_len u32 LE
//! header     UTF-8 `key=value` lines (model config, injection config, vocab)
//! count      u32 LE    number of parameter blobs
//! blob*      name_len u32, name, ndim u32, dims u64*, values f64 LE*
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::injection::{FusionMode, InjectionConfig};
use crate::numeric::{Scalar, Tensor};
use crate::text::Vocab;

pub const MAGIC: &[u8; 8] = b"KFFNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn header_text<S: Scalar>(model: &Model<S>, vocab: &Vocab) -> String {
    let c = model.config();
    let inj = model.injection();
    let layers = inj
        .layers
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let mut out = String::new();
    for (k, v) in [
        ("num_layers", c.num_layers.to_string()),
        ("hidden", c.hidden.to_string()),
        ("intermediate", c.intermediate.to_string()),
        ("num_heads", c.num_heads.to_string()),
        ("vocab_size", c.vocab_size.to_string()),
        ("max_seq_len", c.max_seq_len.to_string()),
        ("seed", c.seed.to_string()),
        ("injection.mode", inj.mode.to_string()),
        ("injection.layers", layers),
        ("injection.top_n", inj.top_n.to_string()),
        ("injection.sparse_m", inj.sparse_m.to_string()),
        ("vocab", vocab.tokens().join(" ")),
    ] {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

pub fn write_checkpoint<S: Scalar, W: Write>(mut w: W, model: &Model<S>, vocab: &Vocab) -> Result<()> {
    let header = header_text(model, vocab);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    let params = model.params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in p.value.data() {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save<S: Scalar>(path: &Path, model: &Model<S>, vocab: &Vocab) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, vocab)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn parse_header(text: &str) -> Result<(ModelConfig, InjectionConfig, Vocab)> {
    let kv: BTreeMap<&str, &str> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("header line {l:?}")))
        })
        .collect::<Result<_>>()?;
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| CheckpointError::Malformed(format!("header lacks {k}")))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| CheckpointError::Malformed(format!("header {k} is not an integer")))
    };
    let config = ModelConfig {
        num_layers: num("num_layers")? as usize,
        hidden: num("hidden")? as usize,
        intermediate: num("intermediate")? as usize,
        num_heads: num("num_heads")? as usize,
        vocab_size: num("vocab_size")? as usize,
        max_seq_len: num("max_seq_len")? as usize,
        seed: num("seed")?,
    };
    let layers = get("injection.layers")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| CheckpointError::Malformed(format!("bad layer index {s:?}")))
        })
        .collect::<Result<_>>()?;
    let injection = InjectionConfig {
        mode: get("injection.mode")?
            .parse::<FusionMode>()
            .map_err(CheckpointError::Malformed)?,
        layers,
        top_n: num("injection.top_n")? as usize,
        sparse_m: num("injection.sparse_m")? as usize,
    };
    let vocab: Vocab = get("vocab")?
        .split(' ')
        .map(String::from)
        .collect::<Vec<_>>()
        .into();
    Ok((config, injection, vocab))
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut r: R) -> Result<(Model<S>, Vocab)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header)
        .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?;
    let (config, injection, vocab) = parse_header(&header)?;
    let mut model = Model::<S>::new(config, injection)?;

    let count = read_u32(&mut r)? as usize;
    if count != model.params().len() {
        return Err(CheckpointError::Malformed(format!(
            "{count} parameter blobs, model expects {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let value = Tensor::new(shape, data).map_err(ModelError::from)?;
        model
            .set_param(&name, value)
            .map_err(|e| CheckpointError::Malformed(format!("parameter {name}: {e}")))?;
    }
    Ok((model, vocab))
}

pub fn load<S: Scalar>(path: &Path) -> Result<(Model<S>, Vocab)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
