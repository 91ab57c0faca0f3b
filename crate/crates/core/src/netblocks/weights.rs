//! Bit-exact weight persistence.
//!
//! Layout: magic `VSDL`, format version (u32 LE), tensor count (u32 LE),
//! then per tensor: name length (u16 LE) + UTF-8 name, rank (u8), dims
//! (u32 LE each), raw little-endian f32 values. Trailing bytes are an
//! error.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;

use super::{ModelSpec, NetError, Network};

pub const WEIGHT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VSDL";

fn io_err(path: &Path, source: std::io::Error) -> NetError {
    NetError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_weights(net: &Network, path: &Path) -> Result<(), NetError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for (name, tensor) in net.params() {
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.bytes.len() {
            return Err(NetError::WeightTruncated {
                path: self.path.display().to_string(),
                context: context.to_string(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, context: &str) -> Result<u16, NetError> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &str) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }
}

/// Raw tensor list from a weight file, independent of any model spec.
pub fn read_weight_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, NetError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(NetError::WeightBadMagic {
            path: path.display().to_string(),
        });
    }
    let version = r.u32("version")?;
    if version != WEIGHT_FORMAT_VERSION {
        return Err(NetError::WeightBadVersion {
            path: path.display().to_string(),
            found: version,
            expected: WEIGHT_FORMAT_VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = r.u16(&format!("tensor {i} name length"))? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec()).map_err(|_| {
            NetError::WeightTruncated {
                path: path.display().to_string(),
                context: format!("tensor {i} name is not UTF-8"),
            }
        })?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for d in 0..rank {
            shape.push(r.u32(&format!("'{name}' dim {d}"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel, &format!("'{name}' values"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| NetError::WeightTensorMismatch {
            path: path.display().to_string(),
            name: name.clone(),
            message: e.to_string(),
        })?;
        tensors.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(NetError::WeightTrailingBytes {
            path: path.display().to_string(),
            extra: bytes.len() - r.pos,
        });
    }
    Ok(tensors)
}

/// Load weights for `spec`, verifying every tensor name and shape in order.
pub fn load_weights(spec: ModelSpec, path: &Path) -> Result<Network, NetError> {
    let expected = Network::zeroed(spec.clone())?;
    let tensors = read_weight_file(path)?;
    if tensors.len() != expected.params().len() {
        return Err(NetError::WeightTensorMismatch {
            path: path.display().to_string(),
            name: "<count>".into(),
            message: format!(
                "file holds {} tensors, spec needs {}",
                tensors.len(),
                expected.params().len()
            ),
        });
    }
    for ((name, tensor), (want_name, want)) in tensors.iter().zip(expected.params()) {
        if name != want_name {
            return Err(NetError::WeightTensorMismatch {
                path: path.display().to_string(),
                name: name.clone(),
                message: format!("expected tensor '{want_name}' at this position"),
            });
        }
        if tensor.shape() != want.shape() {
            return Err(NetError::WeightTensorMismatch {
                path: path.display().to_string(),
                name: name.clone(),
                message: format!(
                    "shape {:?} does not match spec shape {:?}",
                    tensor.shape(),
                    want.shape()
                ),
            });
        }
    }
    Ok(Network::from_parts(spec, tensors, 0))
}
