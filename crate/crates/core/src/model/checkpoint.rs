//! Checkpoint container.
//!
//! ```text
//! magic      8 bytes  "AVFCKPT1"
//! header     u64 length, then the model config as TOML
//! count      u64
//! block*     u32 name length, name, u32 rank, u64 extent per axis,
//!            then every value as little-endian f64
//! ```
//!
//! Loading rebuilds the layout from the header and requires every
//! parameter to appear exactly once with the shape that layout implies.

use std::io::{Read, Write};
use std::path::Path;

use super::{Captioner, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"AVFCKPT1";
const MAX_NAME: usize = 1 << 12;
const MAX_HEADER: usize = 1 << 20;

pub fn write_checkpoint<W: Write>(model: &Captioner, mut w: W) -> Result<()> {
    let header = toml::to_string(model.config()).map_err(|e| Error::Checkpoint(format!("encoding header: {e}")))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(model.params().len() as u64).to_le_bytes())?;
    for (name, t) in model.params().iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

fn take_vec<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Captioner> {
    if &take::<8, _>(&mut r, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(take(&mut r, "header length")?) as usize;
    if header_len > MAX_HEADER {
        return Err(Error::Checkpoint(format!("header of {header_len} bytes is implausible")));
    }
    let header = String::from_utf8(take_vec(&mut r, header_len, "header")?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let config: ModelConfig =
        toml::from_str(&header).map_err(|e| Error::Checkpoint(format!("header: {}", e.message())))?;
    let mut model = Captioner::new(config).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let count = u64::from_le_bytes(take(&mut r, "parameter count")?) as usize;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!("{count} parameter blocks, config implies {}", model.params().len())));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut r, "name length")?) as usize;
        if name_len > MAX_NAME {
            return Err(Error::Checkpoint(format!("name of {name_len} bytes is implausible")));
        }
        let name = String::from_utf8(take_vec(&mut r, name_len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let id = model.params().id(&name).ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
        if std::mem::replace(&mut seen[id], true) {
            return Err(Error::Checkpoint(format!("parameter {name} appears twice")));
        }
        let rank = u32::from_le_bytes(take(&mut r, "rank")?) as usize;
        let expected = model.params().get(id).shape().to_vec();
        if rank != expected.len() {
            return Err(Error::Checkpoint(format!("{name}: rank {rank}, expected {}", expected.len())));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut r, "extent")?) as usize);
        }
        if shape != expected {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, expected {expected:?}")));
        }
        let n: usize = shape.iter().product();
        let bytes = take_vec(&mut r, n * 8, "values")?;
        let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Checkpoint(format!("{name}: non-finite value")));
        }
        *model.params_mut().get_mut(id) = Tensor::new(&shape, data)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last block".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Captioner, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    write_checkpoint(model, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<Captioner> {
    let f = std::fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
