//! `SPHW1` weight files: magic, `u32` length plus `key=value` config text,
//! `u32` record count, then per record `u32` name length, name, `u32` rank,
//! `u32` dims and an `f64` payload. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 5] = b"SPHW1";

pub fn write_params(mut w: impl Write, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    w.write_all(MAGIC)?;
    let text = cfg.to_text();
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    let mut records = Vec::new();
    params.visit(&mut |name, t| records.push((name.to_string(), t.clone())));
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format(format!("truncated SPHW1 {what}")));
    }
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<usize> {
    let b = read_exact(r, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
}

pub fn read_params(mut r: impl Read) -> Result<(ModelConfig, ModelParams)> {
    if read_exact(&mut r, 5, "magic")? != MAGIC {
        return Err(Error::Format("missing SPHW1 magic".into()));
    }
    let len = read_u32(&mut r, "config length")?;
    let text = String::from_utf8(read_exact(&mut r, len, "config")?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let cfg = ModelConfig::from_text(&text).map_err(|e| Error::Format(format!("config block: {e}")))?;
    let mut params = ModelParams::zeros(&cfg)?;
    let mut expected = 0;
    params.visit(&mut |_, _| expected += 1);
    let count = read_u32(&mut r, "record count")?;
    if count != expected {
        return Err(Error::Format(format!("{count} records, configuration implies {expected}")));
    }
    let mut failure = None;
    params.visit_mut(&mut |name, slot| {
        if failure.is_none() {
            if let Err(e) = read_record(&mut r, name, slot) {
                failure = Some(e);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after SPHW1 records".into()));
    }
    Ok((cfg, params))
}

fn read_record(r: &mut impl Read, name: &str, slot: &mut Tensor) -> Result<()> {
    let n = read_u32(r, "record name")?;
    let got = read_exact(r, n, "record name")?;
    if got != name.as_bytes() {
        return Err(Error::Format(format!("expected record `{name}`, found `{}`", String::from_utf8_lossy(&got))));
    }
    let rank = read_u32(r, "record rank")?;
    let shape = (0..rank).map(|_| read_u32(r, "record shape")).collect::<Result<Vec<_>>>()?;
    if shape != slot.shape() {
        return Err(Error::Format(format!("record `{name}` has shape {shape:?}, expected {:?}", slot.shape())));
    }
    let bytes = read_exact(r, slot.len() * 8, "record payload")?;
    for (x, b) in slot.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
        *x = f64::from_le_bytes(b.try_into().expect("8-byte chunk"));
    }
    Ok(())
}

pub fn save_params(path: &Path, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, params, cfg)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    read_params(BufReader::new(File::open(path)?))
}

/// Loads and checks that the stored configuration equals `cfg`.
pub fn load_params_expecting(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    let (stored, params) = load_params(path)?;
    if &stored != cfg {
        return Err(Error::Format(format!(
            "weight file configuration differs:\n{}expected:\n{}",
            stored.to_text(),
            cfg.to_text()
        )));
    }
    Ok(params)
}
