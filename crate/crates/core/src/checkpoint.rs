//! Network checkpoints.
//!
//! Binary layout: magic `NNC1`, u32 format version, u32 layer count,
//! u32 layer dims, u32 action count, u32 atom count, f64 v_min, f64 v_max,
//! then all parameters as little-endian f64 in layer order (each layer's
//! weight matrix row-major, then its bias vector).

use std::fs;
use std::path::Path;

use crate::agent::Support;
use crate::error::{Error, Result};
use crate::math::{Matrix, MlpNet};

const MAGIC: &[u8; 4] = b"NNC1";
const VERSION: u32 = 1;

pub fn save_checkpoint(net: &MlpNet, support: &Support, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(net.layer_dims().len() as u32).to_le_bytes());
    for &d in net.layer_dims() {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&(net.n_actions() as u32).to_le_bytes());
    bytes.extend_from_slice(&(net.n_atoms() as u32).to_le_bytes());
    bytes.extend_from_slice(&support.v_min.to_le_bytes());
    bytes.extend_from_slice(&support.v_max.to_le_bytes());
    for k in 0..net.weights().len() {
        for v in net.weights()[k].as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in &net.biases()[k] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                offset: self.offset as u64,
                what: format!("truncated while reading {what}"),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn fail(&self, what: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            what: what.into(),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(MlpNet, Support)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            what: format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let n_dims = r.u32("layer count")? as usize;
    if !(2..=16).contains(&n_dims) {
        return Err(r.fail(format!("implausible layer count {n_dims}")));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for i in 0..n_dims {
        dims.push(r.u32(&format!("layer dim {i}"))? as usize);
    }
    let n_actions = r.u32("action count")? as usize;
    let n_atoms = r.u32("atom count")? as usize;
    let v_min = r.f64("v_min")?;
    let v_max = r.f64("v_max")?;

    let mut weights = Vec::with_capacity(n_dims - 1);
    let mut biases = Vec::with_capacity(n_dims - 1);
    for k in 0..n_dims - 1 {
        let (rows, cols) = (dims[k + 1], dims[k]);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows * cols {
            data.push(r.f64(&format!("layer {k} weight {i}"))?);
        }
        weights.push(
            Matrix::from_vec(rows, cols, data)
                .map_err(|e| r.fail(format!("layer {k} weights: {e}")))?,
        );
        let mut bias = Vec::with_capacity(rows);
        for i in 0..rows {
            bias.push(r.f64(&format!("layer {k} bias {i}"))?);
        }
        biases.push(bias);
    }
    if r.offset != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.offset)));
    }

    let net = MlpNet::from_parts(dims, weights, biases, n_actions, n_atoms)
        .map_err(|e| r.fail(format!("inconsistent header: {e}")))?;
    let support =
        Support::new(v_min, v_max, n_atoms).map_err(|e| r.fail(format!("bad support: {e}")))?;
    Ok((net, support))
}
