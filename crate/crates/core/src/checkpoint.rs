//! Model checkpoint format and atomic file writes.
//!
//! An MLP checkpoint is little-endian binary:
//!
//! ```text
//! magic        8 bytes   "COEMLP01"
//! seed         u64
//! layer_count  u32
//! per layer    u32 input_dim, u32 output_dim, u8 activation (0 = none, 1 = relu)
//! per layer    f64 weights (output_dim × input_dim, row-major), f64 bias (output_dim)
//! ```
//!
//! Values are stored by bit pattern, so a save/load round trip is exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Activation, DenseLayer, Mlp};

pub const MAGIC: &[u8; 8] = b"COEMLP01";

pub fn encode_mlp(mlp: &Mlp, seed: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + mlp.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&(mlp.layers().len() as u32).to_le_bytes());
    for l in mlp.layers() {
        out.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
        out.push(match l.activation {
            Activation::None => 0,
            Activation::Relu => 1,
        });
    }
    for l in mlp.layers() {
        for v in l.weights.as_slice().iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Returns the model and the seed recorded in its header.
pub fn decode_mlp(bytes: &[u8]) -> Result<(Mlp, u64)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(Error::Checkpoint("no layers".into()));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let input = r.u32()? as usize;
        let output = r.u32()? as usize;
        let act = match r.take(1)?[0] {
            0 => Activation::None,
            1 => Activation::Relu,
            other => return Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        };
        shapes.push((input, output, act));
    }
    let mut layers = Vec::with_capacity(count);
    for (input, output, activation) in shapes {
        let w = (0..input * output).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let bias = (0..output).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(DenseLayer {
            weights: Matrix::from_vec(output, input, w)?,
            bias,
            activation,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((Mlp::new(layers)?, seed))
}

pub fn save_mlp(path: &Path, mlp: &Mlp, seed: u64) -> Result<()> {
    write_atomic(path, &encode_mlp(mlp, seed))
}

pub fn load_mlp(path: &Path) -> Result<(Mlp, u64)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_mlp(&bytes)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    res.map_err(|e| Error::io(path, e))
}
