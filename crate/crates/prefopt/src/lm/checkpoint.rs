//! Model checkpoint format.
//!
//! Layout: magic "PLAB", format version u32, vocabulary (length-prefixed
//! UTF-8 tokens), hyperparams block, then each tensor as (name length,
//! name, rank, dims, little-endian f64 payload). Save/load round-trips
//! byte-stably.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use super::{LmError, ModelParams, Vocabulary};
use crate::lm::HyperParams;

const MAGIC: &[u8; 4] = b"PLAB";
const VERSION: u32 = 1;

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub(crate) fn write_string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub(crate) fn read_string(r: &mut impl Read) -> Result<String, LmError> {
    let len = read_u32(r).map_err(|e| LmError::Checkpoint(e.to_string()))? as usize;
    if len > 1 << 24 {
        return Err(LmError::Checkpoint(format!("string length {len} implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| LmError::Checkpoint(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| LmError::Checkpoint(e.to_string()))
}

pub(crate) fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    write_string(w, name)?;
    w.write_all(&[2u8])?; // rank
    write_u32(w, t.rows as u32)?;
    write_u32(w, t.cols as u32)?;
    for &v in &t.data {
        write_f64(w, v)?;
    }
    Ok(())
}

pub(crate) fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor), LmError> {
    let name = read_string(r)?;
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)
        .map_err(|e| LmError::Checkpoint(e.to_string()))?;
    if rank[0] != 2 {
        return Err(LmError::Checkpoint(format!(
            "tensor '{name}': unsupported rank {}",
            rank[0]
        )));
    }
    let rows = read_u32(r).map_err(|e| LmError::Checkpoint(e.to_string()))? as usize;
    let cols = read_u32(r).map_err(|e| LmError::Checkpoint(e.to_string()))? as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(LmError::Checkpoint(format!(
            "tensor '{name}': dims {rows}x{cols} implausible"
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(read_f64(r).map_err(|e| LmError::Checkpoint(e.to_string()))?);
    }
    Ok((name, Tensor { rows, cols, data }))
}

pub(crate) fn write_hyperparams(w: &mut impl Write, hp: &HyperParams) -> std::io::Result<()> {
    write_u32(w, hp.n_layers as u32)?;
    write_u32(w, hp.d_model as u32)?;
    write_u32(w, hp.n_heads as u32)?;
    write_u32(w, hp.ctx_len as u32)?;
    write_u32(w, hp.vocab_size as u32)?;
    write_u32(w, hp.adapter_rank.unwrap_or(0) as u32)
}

pub(crate) fn read_hyperparams(r: &mut impl Read) -> Result<HyperParams, LmError> {
    let err = |e: std::io::Error| LmError::Checkpoint(e.to_string());
    let n_layers = read_u32(r).map_err(err)? as usize;
    let d_model = read_u32(r).map_err(err)? as usize;
    let n_heads = read_u32(r).map_err(err)? as usize;
    let ctx_len = read_u32(r).map_err(err)? as usize;
    let vocab_size = read_u32(r).map_err(err)? as usize;
    let rank = read_u32(r).map_err(err)? as usize;
    Ok(HyperParams {
        n_layers,
        d_model,
        n_heads,
        ctx_len,
        vocab_size,
        adapter_rank: if rank == 0 { None } else { Some(rank) },
    })
}

pub(crate) fn write_model_body(
    w: &mut impl Write,
    vocab: &Vocabulary,
    params: &ModelParams,
) -> std::io::Result<()> {
    write_u32(w, vocab.size() as u32)?;
    for sym in vocab.symbols() {
        write_string(w, sym)?;
    }
    write_hyperparams(w, &params.hp)?;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    params.for_each_tensor(|n, t| tensors.push((n.to_string(), t.clone())));
    write_u32(w, tensors.len() as u32)?;
    for (name, t) in &tensors {
        write_tensor(w, name, t)?;
    }
    Ok(())
}

pub(crate) fn read_model_body(r: &mut impl Read) -> Result<(Vocabulary, ModelParams), LmError> {
    let err = |e: std::io::Error| LmError::Checkpoint(e.to_string());
    let n_sym = read_u32(r).map_err(err)? as usize;
    let mut symbols = Vec::with_capacity(n_sym);
    for _ in 0..n_sym {
        symbols.push(read_string(r)?);
    }
    let vocab = Vocabulary::from_symbols(symbols)?;
    let hp = read_hyperparams(r)?;
    if hp.vocab_size != vocab.size() {
        return Err(LmError::Checkpoint(format!(
            "hyperparam vocab_size {} does not match vocabulary size {}",
            hp.vocab_size,
            vocab.size()
        )));
    }
    let n_tensors = read_u32(r).map_err(err)? as usize;
    let mut params = ModelParams::init(hp, 0);
    if let Some(rank) = hp.adapter_rank {
        // init() already attached adapters via hp
        debug_assert!(params.adapters_enabled());
        let _ = rank;
    }
    let mut loaded = std::collections::HashMap::new();
    for _ in 0..n_tensors {
        let (name, t) = read_tensor(r)?;
        loaded.insert(name, t);
    }
    let mut missing: Option<String> = None;
    let mut mismatch: Option<String> = None;
    params.for_each_tensor_mut(|name, t| match loaded.remove(name) {
        Some(src) if src.rows == t.rows && src.cols == t.cols => *t = src,
        Some(_) => mismatch = Some(name.to_string()),
        None => missing = Some(name.to_string()),
    });
    if let Some(name) = mismatch {
        return Err(LmError::Checkpoint(format!("tensor '{name}' has wrong shape")));
    }
    if let Some(name) = missing {
        return Err(LmError::Checkpoint(format!("tensor '{name}' missing")));
    }
    if !loaded.is_empty() {
        return Err(LmError::Checkpoint(format!(
            "unexpected tensors in checkpoint: {:?}",
            loaded.keys().collect::<Vec<_>>()
        )));
    }
    Ok((vocab, params))
}

/// Save a model checkpoint.
pub fn save_model(path: &Path, vocab: &Vocabulary, params: &ModelParams) -> Result<(), LmError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    write_u32(&mut buf, VERSION).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    write_model_body(&mut buf, vocab, params).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    std::fs::write(path, buf).map_err(|e| LmError::Checkpoint(e.to_string()))
}

/// Load a model checkpoint.
pub fn load_model(path: &Path) -> Result<(Vocabulary, ModelParams), LmError> {
    let bytes = std::fs::read(path).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| LmError::Checkpoint(e.to_string()))?;
    if &magic != MAGIC {
        return Err(LmError::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    if version != VERSION {
        return Err(LmError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let result = read_model_body(&mut r)?;
    if !r.is_empty() {
        return Err(LmError::Checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            r.len()
        )));
    }
    Ok(result)
}
