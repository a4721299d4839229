//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "SIMT1"
//! config_len, config_len bytes of canonical config text
//! param_count
//! per parameter, in key order:
//!   name_len, name bytes, rank, rank × extent, numel × f32 (LE)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 5] = b"SIMT1";

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    Ok(buf)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}

fn utf8(bytes: Vec<u8>, what: &str) -> Result<String> {
    String::from_utf8(bytes).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
}

/// Writes every distinct parameter as 32-bit floats.
pub fn write<T: Element>(model: &Model<T>, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    let cfg = model.config().to_canonical();
    put_u32(w, cfg.len())?;
    w.write_all(cfg.as_bytes())?;
    let params = model.params();
    put_u32(w, params.len())?;
    for p in &params {
        put_u32(w, p.key().len())?;
        w.write_all(p.key().as_bytes())?;
        let value = p.value();
        put_u32(w, value.rank())?;
        for &e in value.shape() {
            put_u32(w, e)?;
        }
        let mut bytes = Vec::with_capacity(value.numel() * 4);
        for v in value.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

/// Rebuilds the model from its stored config and overwrites every
/// parameter. The stored key set must match the rebuilt model exactly.
pub fn read<T: Element>(r: &mut impl Read) -> Result<Model<T>> {
    let magic = get_bytes(r, MAGIC.len()).map_err(|_| Error::Checkpoint("bad magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let n = get_u32(r)?;
    let cfg = ModelConfig::parse(&utf8(get_bytes(r, n)?, "config")?)?;
    let model = Model::<T>::build(&cfg, cfg.seed)?;
    let expected = model.params();
    let count = get_u32(r)?;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, model has {}",
            expected.len()
        )));
    }
    for handle in &expected {
        let n = get_u32(r)?;
        let name = utf8(get_bytes(r, n)?, "parameter name")?;
        if name != handle.key() {
            return Err(Error::Checkpoint(format!("expected parameter `{}`, found `{name}`", handle.key())));
        }
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        if shape != handle.shape() {
            return Err(Error::Checkpoint(format!("`{name}` has shape {shape:?}, expected {:?}", handle.shape())));
        }
        let numel: usize = shape.iter().product();
        let raw = get_bytes(r, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        handle.set_value(Tensor::new(&shape, data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok(model)
}

pub fn save<T: Element>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read(&mut f)
}
