//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "PGCKPT01"
//! config       6 × u64  n_layers, d_model, n_heads, d_ff, vocab_size, max_seq_len
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u16
//!   name       name_len bytes of UTF-8 ("tok_emb", "L0.q", "L3.down", ...)
//!   rows       u64
//!   cols       u64
//!   data       rows × cols f64, row-major
//! ```
//!
//! Tensors appear in [`ModelParams::tensor_names`] order. Values are stored
//! as raw IEEE-754 bits, so a save/load round trip is lossless.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"PGCKPT01";

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    write_u64(w, m.rows() as u64)?;
    write_u64(w, m.cols() as u64)?;
    for x in m.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let n = rows
        .checked_mul(cols)
        .filter(|n| *n <= 1 << 28)
        .ok_or_else(|| Error::Format(format!("implausible tensor shape {rows}×{cols}")))?;
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Matrix::new(rows, cols, data)
}

pub(crate) fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Format("name too long".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

pub(crate) fn read_name(r: &mut impl Read) -> Result<String> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    let mut name = vec![0u8; u16::from_le_bytes(b) as usize];
    r.read_exact(&mut name)?;
    String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))
}

pub fn write_checkpoint(w: &mut impl Write, params: &ModelParams) -> Result<()> {
    w.write_all(MAGIC)?;
    let c = &params.config;
    for v in [c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len] {
        write_u64(w, v as u64)?;
    }
    let names = params.tensor_names();
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in names.iter().zip(tensors) {
        write_name(w, name)?;
        write_matrix(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a parameter checkpoint (bad magic)".into()));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = read_u64(r)? as usize;
    }
    let config = ModelConfig {
        n_layers: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        d_ff: dims[3],
        vocab_size: dims[4],
        max_seq_len: dims[5],
    };
    let mut params = ModelParams::zeros(config)?;
    let mut count = [0u8; 4];
    r.read_exact(&mut count)?;
    let names = params.tensor_names();
    if u32::from_le_bytes(count) as usize != names.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, config implies {}",
            u32::from_le_bytes(count),
            names.len()
        )));
    }
    for (expected, slot) in names.iter().zip(params.tensors_mut()) {
        let name = read_name(r)?;
        if &name != expected {
            return Err(Error::Format(format!("expected tensor {expected}, found {name}")));
        }
        let m = read_matrix(r)?;
        m.ensure_shape(slot.rows(), slot.cols(), &name)?;
        *slot = m;
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
