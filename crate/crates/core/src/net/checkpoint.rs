//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "SR2C"  u16 version
//! u32 n   n bytes of ArchConfig JSON
//! f64     center learning rate
//! u32     tensor count
//! per tensor: u32 ndim, ndim × u32 extents, f32 values
//! ```
//!
//! Tensors follow the network's declaration order (extractor, classifier,
//! decoder) with the center table last.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::loss::CenterTable;
use crate::nn::Tensor;

use super::{init_params, ArchConfig, ModelParams, NetError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SR2C";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_tensor(out: &mut impl Write, t: &Tensor<f32>) -> io::Result<()> {
    out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn write_checkpoint(params: &ModelParams, out: &mut impl Write) -> Result<(), NetError> {
    params.check_shapes()?;
    let json = serde_json::to_vec(&params.config).map_err(|e| NetError::Format(e.to_string()))?;
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&params.centers.alpha.to_le_bytes())?;
    let mut tensors = params.weights.tensors();
    tensors.push(&params.centers.centers);
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        put_tensor(out, t)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>, NetError> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => NetError::Format(format!("truncated while reading {what}")),
            _ => NetError::Io(e),
        })?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], NetError> {
        Ok(self.bytes(N, what)?.try_into().expect("length"))
    }

    fn u32(&mut self, what: &str) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn tensor(&mut self, expected: &[usize], index: usize) -> Result<Tensor<f32>, NetError> {
        let ndim = self.u32("tensor rank")? as usize;
        if ndim != expected.len() {
            return Err(NetError::Format(format!(
                "tensor {index} has rank {ndim}, architecture expects {}",
                expected.len()
            )));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32("tensor extent")? as usize);
        }
        if shape != expected {
            return Err(NetError::Format(format!(
                "tensor {index} has shape {shape:?}, architecture expects {expected:?}"
            )));
        }
        let len: usize = shape.iter().product();
        let raw = self.bytes(len * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::from_vec(&shape, data)?)
    }
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<ModelParams, NetError> {
    let mut r = Reader { inner: input };
    let magic: [u8; 4] = r.array("magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NetError::Format(format!("bad magic {magic:?}, expected \"SR2C\"")));
    }
    let version = u16::from_le_bytes(r.array("version")?);
    if version != CHECKPOINT_VERSION {
        return Err(NetError::Format(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let json_len = r.u32("config length")? as usize;
    let json = r.bytes(json_len, "config")?;
    let config: ArchConfig = serde_json::from_slice(&json).map_err(|e| NetError::Format(format!("config: {e}")))?;
    let alpha = f64::from_le_bytes(r.array("center rate")?);
    let mut params: ModelParams = init_params(&config, 0)?;
    let count = r.u32("tensor count")? as usize;
    let slots = params.weights.tensors().len() + 1;
    if count != slots {
        return Err(NetError::Format(format!(
            "{count} tensors stored, architecture has {slots}"
        )));
    }
    for (i, t) in params.weights.tensors_mut().into_iter().enumerate() {
        *t = r.tensor(t.shape(), i)?;
    }
    let centers = r.tensor(&[config.known_classes(), config.semantic_dim], slots - 1)?;
    params.centers = CenterTable { centers, alpha };
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(NetError::Format("trailing bytes after the last tensor".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), NetError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, NetError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
