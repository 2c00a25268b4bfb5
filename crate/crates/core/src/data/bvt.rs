//! `.bvt` tensor container.
//!
//! ```text
//! 0   "BVT1"
//! 4   dtype u8 (0 f32, 1 f64, 2 u8, 3 complex64)
//! 5   ndim u8
//! 6   2 reserved bytes, zero
//! 8   zero padding to 16
//! 16  ndim × u32 LE dims
//! ..  row-major LE payload (complex64 = interleaved f32 re, im)
//! ```

use std::path::Path;

use num_complex::Complex32;

use crate::error::{Error, Result};
use crate::numerics::{DType, Tensor, TensorData};

pub const MAGIC: &[u8; 4] = b"BVT1";
pub const HEADER_LEN: usize = 16;

/// Serialized size of a tensor with this header.
pub fn encoded_len(dtype: DType, shape: &[usize]) -> usize {
    HEADER_LEN + 4 * shape.len() + dtype.size_of() * shape.iter().product::<usize>()
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::contract(format!(
            "{} dims exceed the container limit",
            shape.len()
        )));
    }
    if let Some(d) = shape.iter().find(|&&d| d > u32::MAX as usize) {
        return Err(Error::contract(format!("dimension {d} exceeds u32")));
    }
    let mut out = Vec::with_capacity(encoded_len(t.dtype(), shape));
    out.extend_from_slice(MAGIC);
    out.push(t.dtype() as u8);
    out.push(shape.len() as u8);
    out.resize(HEADER_LEN, 0);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t.data() {
        TensorData::F32(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
        TensorData::Complex64(v) => v.iter().for_each(|c| {
            out.extend_from_slice(&c.re.to_le_bytes());
            out.extend_from_slice(&c.im.to_le_bytes());
        }),
    }
    Ok(out)
}

/// Decode a container image. `path` is only used in error messages.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |offset: usize, msg: String| Error::format(path, offset as u64, msg);
    if bytes.len() < HEADER_LEN {
        return Err(fail(
            bytes.len(),
            format!("truncated header ({} bytes)", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:02x?}", &bytes[..4])));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| fail(4, format!("unknown dtype code {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    if let Some(i) = (6..HEADER_LEN).find(|&i| bytes[i] != 0) {
        return Err(fail(i, "reserved header bytes must be zero".into()));
    }
    let dims_end = HEADER_LEN + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(fail(
            bytes.len(),
            format!("truncated shape: {ndim} dims declared"),
        ));
    }
    let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| {
            fail(
                HEADER_LEN,
                format!("element count overflows for shape {shape:?}"),
            )
        })?;
    let payload_len = numel
        .checked_mul(dtype.size_of())
        .ok_or_else(|| fail(HEADER_LEN, "payload size overflows".into()))?;
    let have = bytes.len() - dims_end;
    if have != payload_len {
        return Err(fail(
            dims_end,
            format!("payload is {have} bytes, shape {shape:?} of {dtype:?} needs {payload_len}"),
        ));
    }
    let p = &bytes[dims_end..];
    let data = match dtype {
        DType::F32 => TensorData::F32(
            p.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            p.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => TensorData::U8(p.to_vec()),
        DType::Complex64 => TensorData::Complex64(
            p.chunks_exact(8)
                .map(|c| {
                    Complex32::new(
                        f32::from_le_bytes(c[..4].try_into().unwrap()),
                        f32::from_le_bytes(c[4..].try_into().unwrap()),
                    )
                })
                .collect(),
        ),
    };
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode_tensor(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}
