//! Flat binary tensor files.
//!
//! Layout, all little-endian: the 8-byte magic `RPTENSR1`, then `n`, `c`,
//! `h`, `w` as `u64`, then `n*c*h*w` `f64` values in NCHW order.

use std::io::{Read, Write};

use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RPTENSR1";

pub fn write_tensor<W: Write>(mut out: W, t: &Tensor) -> std::io::Result<()> {
    let s = t.shape();
    out.write_all(MAGIC)?;
    for d in [s.n, s.c, s.h, s.w] {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

pub fn read_tensor<R: Read>(mut input: R) -> Result<Tensor> {
    let io = |e: std::io::Error| Error::Config(format!("reading tensor: {e}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Config("not a tensor file".into()));
    }
    let mut word = [0u8; 8];
    let mut dims = [0usize; 4];
    for d in &mut dims {
        input.read_exact(&mut word).map_err(io)?;
        *d = usize::try_from(u64::from_le_bytes(word))
            .map_err(|_| Error::Config("tensor dimension overflows".into()))?;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Config("tensor size overflows".into()))?;
    let mut data = Vec::with_capacity(numel.min(1 << 24));
    for _ in 0..numel {
        input.read_exact(&mut word).map_err(io)?;
        data.push(f64::from_le_bytes(word));
    }
    Tensor::from_vec(shape, data)
}
