//! Raw tensor files.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "SQTN"
//!      4     1  dtype code (1 = f32, 2 = i8, 3 = i32)
//!      5     1  rank (1..=4)
//!      6     2  reserved, zero
//!      8     8  dims as 4 × u16 LE; entries past `rank` are zero
//!     16     …  elements, row-major, little-endian
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{AnyTensor, DType, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"SQTN";
pub const HEADER_LEN: usize = 16;

pub fn encode_tensor(t: &AnyTensor) -> Result<Vec<u8>> {
    let dims = t.dims();
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::Format(format!("rank {} not in 1..=4", dims.len())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + dims.iter().product::<usize>() * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(t.dtype().code());
    out.push(dims.len() as u8);
    out.extend_from_slice(&[0, 0]);
    for i in 0..4 {
        let d = dims.get(i).copied().unwrap_or(0);
        let d =
            u16::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds 65535")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t {
        AnyTensor::F32(t) => t.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
        AnyTensor::I8(t) => t.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
        AnyTensor::I32(t) => t.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "tensor file has {} bytes, shorter than its header",
            bytes.len()
        )));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::Format(format!("rank {rank} not in 1..=4")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u16::from_le_bytes([bytes[8 + 2 * i], bytes[9 + 2 * i]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * dtype.size() {
        return Err(Error::Dimension {
            context: format!(
                "tensor payload of {} bytes does not match dims (dtype {dtype:?})",
                payload.len()
            ),
            left: dims,
            right: vec![payload.len() / dtype.size()],
        });
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(
            dims,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )?),
        DType::I8 => AnyTensor::I8(Tensor::new(
            dims,
            payload.iter().map(|&b| b as i8).collect(),
        )?),
        DType::I32 => AnyTensor::I32(Tensor::new(
            dims,
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )?),
    })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &AnyTensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    decode_tensor(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
