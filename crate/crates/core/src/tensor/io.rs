//! MLT1 tensor container.
//!
//! Layout (little-endian): magic `MLT1`, u8 dtype code (0 = f32, 1 = f64),
//! u32 rank, u32 per dimension, then the row-major payload. Records may be
//! concatenated; checkpoints index them by byte offset.

use std::io::{Read, Write};

use crate::{Error, Real, Result};

pub const MAGIC: &[u8; 4] = b"MLT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    /// Storage type of [`Real`] in this build.
    pub const NATIVE: DType = if std::mem::size_of::<Real>() == 4 {
        DType::F32
    } else {
        DType::F64
    };

    fn from_code(code: u8) -> Result<DType> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown MLT1 dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Encoded size of one record.
pub fn record_len(shape: &[usize], dtype: DType) -> usize {
    4 + 1 + 4 + 4 * shape.len() + dtype.width() * shape.iter().product::<usize>()
}

pub fn write_record<W: Write>(out: &mut W, shape: &[usize], data: &[Real], dtype: DType) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let mut buf = Vec::with_capacity(record_len(shape, dtype));
    buf.extend_from_slice(MAGIC);
    buf.push(dtype as u8);
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        DType::F32 => data.iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => data.iter().for_each(|&v| buf.extend_from_slice(&(v as f64).to_le_bytes())),
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads one record; truncation or a bad header is a format error.
pub fn read_record<R: Read>(input: &mut R) -> Result<(Vec<usize>, Vec<Real>, DType)> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad MLT1 magic".into()));
    }
    let mut code = [0u8; 1];
    read_exact(input, &mut code)?;
    let dtype = DType::from_code(code[0])?;
    let rank = read_u32(input)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible MLT1 rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(input)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * dtype.width()];
    read_exact(input, &mut bytes)?;
    let data = match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect(),
    };
    Ok((shape, data, dtype))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated MLT1 record".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
