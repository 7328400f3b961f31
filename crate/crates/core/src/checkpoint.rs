//! `RACNN1` parameter checkpoints.
//!
//! Layout: the 6-byte magic `RACNN1`, then for each tensor until end of file:
//! name length (u64 LE), UTF-8 name, rank (u64 LE), `rank` extents (u64 LE),
//! and `numel` values as f32 LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 6] = b"RACNN1";

pub fn write_to<T: Real, W: Write>(mut w: W, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_from<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected RACNN1".into()));
    }
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 8];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u64::from_le_bytes(len_buf) as usize;
        if name_len > 1 << 16 {
            return Err(Error::Checkpoint(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("{name}: truncated values")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save<T: Real>(path: &Path, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    write_to(BufWriter::new(File::create(path)?), tensors)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    read_from(BufReader::new(file))
}

pub fn save_params<T: Real>(path: &Path, set: &ParamSet<T>) -> Result<()> {
    save(path, &set.named_tensors())
}

/// Loads every parameter of `set` by name. Extra tensors in the file are
/// ignored; missing ones are an error.
pub fn load_params<T: Real>(path: &Path, set: &mut ParamSet<T>) -> Result<()> {
    let tensors = load(path)?;
    let names: Vec<String> = set.params().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let (_, t) = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks tensor {name}")))?;
        set.load(&name, t.cast())?;
    }
    Ok(())
}
