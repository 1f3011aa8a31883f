//! Checkpoint archive: model config, iteration counter, and named tensors
//! (parameters plus optimizer moments) in one little-endian binary file.
//!
//! Layout:
//! ```text
//! magic   b"SVCK"
//! version u32 = 1
//! clen    u32, config JSON (clen bytes)
//! iter    u64
//! count   u32
//! tensor: nlen u32, name (nlen bytes, utf-8)
//!         ndim u32, dims (ndim × u32)
//!         dtype u8 (0 = f64)
//!         payload (product(dims) × f64, row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;

use crate::config::ModelConfig;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SVCK";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: ModelConfig,
    pub iteration: u64,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&ckpt.config)?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&ckpt.iteration.to_le_bytes())?;
    w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in &ckpt.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
        for d in tensor.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        w.write_all(&[0u8])?;
        for v in tensor.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::data(format!("checkpoint truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::data("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let clen = read_u32(&mut r, "config length")? as usize;
    let mut cbuf = vec![0u8; clen];
    read_exact(&mut r, &mut cbuf, "config")?;
    let config: ModelConfig = serde_json::from_slice(&cbuf)?;
    let mut ibuf = [0u8; 8];
    read_exact(&mut r, &mut ibuf, "iteration")?;
    let iteration = u64::from_le_bytes(ibuf);
    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let nlen = read_u32(&mut r, "name length")? as usize;
        let mut nbuf = vec![0u8; nlen];
        read_exact(&mut r, &mut nbuf, "name")?;
        let name = String::from_utf8(nbuf)
            .map_err(|_| Error::data(format!("tensor {i}: name is not utf-8")))?;
        let ndim = read_u32(&mut r, "rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut r, "dimension")? as usize);
        }
        let mut dtype = [0u8; 1];
        read_exact(&mut r, &mut dtype, "dtype")?;
        if dtype[0] != 0 {
            return Err(Error::data(format!("tensor `{name}`: unknown dtype {}", dtype[0])));
        }
        let n: usize = dims.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut vbuf = [0u8; 8];
        for _ in 0..n {
            read_exact(&mut r, &mut vbuf, "payload")?;
            values.push(f64::from_le_bytes(vbuf));
        }
        let tensor = ArrayD::from_shape_vec(dims, values)
            .map_err(|e| Error::data(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, tensor));
    }
    Ok(Checkpoint { config, iteration, tensors })
}
