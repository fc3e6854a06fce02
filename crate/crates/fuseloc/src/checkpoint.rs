//! Flat binary checkpoint container.
//!
//! Layout: magic bytes `FLC1`, a little-endian u64 byte length followed by
//! a UTF-8 `key = value` header block (architecture and hyperparameters),
//! then one record per parameter until end of file. Each record is the
//! name length (u64 LE), the UTF-8 name, the rank (u64 LE), the dims
//! (u64 LE each), and the values (f32 LE each). Parameters are written in
//! registration order, buffers included, so a save is byte-reproducible.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::ParamSet;
use crate::branches::{FusionHead, FusionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::pooling::PoolMethod;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLC1";

/// Architecture and run metadata stored in the checkpoint's text header.
#[derive(Debug, Clone)]
pub struct CheckpointHeader {
    /// Numeric precision the parameters were trained in ("f32" or "f64").
    pub precision: String,
    pub model: ModelConfig,
}

impl CheckpointHeader {
    pub fn to_text(&self) -> String {
        let m = &self.model;
        format!(
            "precision = {}\n\
             k = {}\n\
             pc_channels = {}\n\
             image_channels = {}\n\
             fusion_mode = {}\n\
             fusion_head = {}\n\
             pool = {}\n\
             quantization_step = {}\n",
            self.precision,
            m.k,
            join_dims(&m.pc_channels),
            join_dims(&m.image_channels),
            m.fusion_mode.name(),
            m.fusion_head.name(),
            m.pool.name(),
            m.quantization_step,
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut precision = None;
        let mut model = ModelConfig::default();
        let mut seen_k = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::mismatch(format!(
                    "checkpoint header line {} is not `key = value`: {line:?}",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::mismatch(format!("checkpoint header: bad {what} value {value:?}"))
            };
            match key {
                "precision" => match value {
                    "f32" | "f64" => precision = Some(value.to_string()),
                    _ => return Err(bad("precision")),
                },
                "k" => {
                    model.k = value.parse().map_err(|_| bad("k"))?;
                    seen_k = true;
                }
                "pc_channels" => model.pc_channels = parse_dims(value)?,
                "image_channels" => model.image_channels = parse_dims(value)?,
                "fusion_mode" => {
                    model.fusion_mode =
                        FusionMode::parse(value).ok_or_else(|| bad("fusion_mode"))?
                }
                "fusion_head" => {
                    model.fusion_head =
                        FusionHead::parse(value).ok_or_else(|| bad("fusion_head"))?
                }
                "pool" => model.pool = PoolMethod::parse(value).ok_or_else(|| bad("pool"))?,
                "quantization_step" => {
                    model.quantization_step =
                        value.parse().map_err(|_| bad("quantization_step"))?
                }
                other => {
                    return Err(Error::mismatch(format!(
                        "checkpoint header: unknown key {other:?}"
                    )))
                }
            }
        }
        let precision = precision
            .ok_or_else(|| Error::mismatch("checkpoint header: missing precision"))?;
        if !seen_k {
            return Err(Error::mismatch("checkpoint header: missing k"));
        }
        model.validate()?;
        Ok(CheckpointHeader { precision, model })
    }
}

fn join_dims(dims: &[usize; 4]) -> String {
    dims.map(|d| d.to_string()).join(",")
}

fn parse_dims(value: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::mismatch(format!("checkpoint header: bad channel list {value:?}")))?;
    parts.try_into().map_err(|_| {
        Error::mismatch(format!("checkpoint header: expected 4 channel widths, got {value:?}"))
    })
}

/// One parameter record as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Write the header and every parameter (buffers included) to `path`.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    header: &CheckpointHeader,
    params: &ParamSet<F>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let text = header.to_text();
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    for (_, p) in params.iter() {
        w.write_all(&(p.name.len() as u64).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.shape.len() as u64).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &p.values {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read the header and all parameter records.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<RawParam>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic bytes")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::mismatch(format!(
            "not a checkpoint: expected magic {CHECKPOINT_MAGIC:?}, got {magic:?}"
        )));
    }
    let header_len = read_u64(&mut r, "header length")? as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, "header block")?;
    let header_text = String::from_utf8(header_bytes)
        .map_err(|_| Error::mismatch("checkpoint header is not valid UTF-8"))?;
    let header = CheckpointHeader::parse(&header_text)?;

    let mut records = Vec::new();
    loop {
        let mut len_bytes = [0u8; 8];
        match r.read(&mut len_bytes)? {
            0 => break, // clean end of file
            8 => {}
            n => {
                // A short read mid-stream may still be a partial buffer;
                // finish the u64 or fail.
                read_exact(&mut r, &mut len_bytes[n..], "record name length")?;
            }
        }
        let name_len = u64::from_le_bytes(len_bytes) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "record name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::mismatch("checkpoint record name is not valid UTF-8"))?;
        let rank = read_u64(&mut r, "record rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "record dim")? as usize);
        }
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            read_exact(&mut r, &mut buf, "record values")?;
            values.push(f32::from_le_bytes(buf));
        }
        records.push(RawParam { name, shape, values });
    }
    Ok((header, records))
}

/// Read a checkpoint and copy its values into an existing parameter set.
///
/// Every record must match a registered parameter by name and shape, and
/// every registered parameter must be covered; anything else is an
/// artifact mismatch.
pub fn load_checkpoint<F: Scalar>(
    path: &Path,
    params: &mut ParamSet<F>,
) -> Result<CheckpointHeader> {
    let (header, records) = read_checkpoint(path)?;
    if records.len() != params.len() {
        return Err(Error::mismatch(format!(
            "checkpoint holds {} parameters but the model has {}",
            records.len(),
            params.len()
        )));
    }
    for rec in &records {
        let id = params
            .lookup(&rec.name)
            .map_err(|_| Error::mismatch(format!("checkpoint parameter {:?} is not in the model", rec.name)))?;
        let p = params.get_mut(id);
        if p.shape != rec.shape {
            return Err(Error::mismatch(format!(
                "checkpoint parameter {:?} has shape {:?} but the model expects {:?}",
                rec.name, rec.shape, p.shape
            )));
        }
        for (slot, &v) in p.values.iter_mut().zip(&rec.values) {
            *slot = F::from_f64(v as f64);
        }
    }
    Ok(header)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::mismatch(format!("checkpoint truncated while reading {what}")))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}
