//! Versioned binary checkpoint format.
//!
//! Layout: the magic `TAPCKPT1`, a length-prefixed JSON metadata block,
//! then named parameter sections. Every tensor is written as
//! name-length-prefixed UTF-8, a dimension list, and raw little-endian f64
//! data. The same training run always produces byte-identical files.

use super::nets::Params;
use crate::autodiff::Tensor;
use crate::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TAPCKPT1";

pub fn write_checkpoint<M: Serialize>(
    path: &Path,
    meta: &M,
    sections: &[(&str, &Params)],
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    let meta_bytes = serde_json::to_vec(meta).map_err(|e| Error::Data(format!("metadata encoding: {e}")))?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&meta_bytes).map_err(io_err)?;

    w.write_all(&(sections.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, params) in sections {
        write_str(&mut w, name).map_err(io_err)?;
        w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io_err)?;
        for (pname, tensor) in params.iter() {
            write_str(&mut w, pname).map_err(io_err)?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes()).map_err(io_err)?;
            for &d in tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_checkpoint<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<(String, Params)>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "TAPCKPT1",
        });
    }
    let meta_len = read_u32(&mut r, path, "metadata length")? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta_bytes, path, "metadata")?;
    let meta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;

    let n_sections = read_u32(&mut r, path, "section count")? as usize;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let sname = read_string(&mut r, path)?;
        let n_params = read_u32(&mut r, path, "parameter count")? as usize;
        let mut params = Params::new();
        for _ in 0..n_params {
            let pname = read_string(&mut r, path)?;
            let ndim = read_u32(&mut r, path, "tensor rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r, path, "tensor dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            for v in &mut data {
                let mut buf = [0u8; 8];
                read_exact(&mut r, &mut buf, path, "tensor data")?;
                *v = f64::from_le_bytes(buf);
            }
            params.add(pname, Tensor::from_vec(shape, data)?);
        }
        sections.push((sname, params));
    }
    Ok((meta, sections))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_string<R: Read>(r: &mut R, path: &Path) -> Result<String> {
    let len = read_u32(r, path, "string length")? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, path, "string")?;
    String::from_utf8(buf).map_err(|_| Error::Data(format!("invalid UTF-8 in {}", path.display())))
}

fn read_u32<R: Read>(r: &mut R, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Truncated {
        path: path.to_path_buf(),
        detail: format!("while reading {what}"),
    })
}
