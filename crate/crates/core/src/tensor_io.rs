//! Binary tensor files.
//!
//! ```text
//! "CADC" | u8 version = 1 | u8 dtype (0 = f64, 1 = i32) | u8 rank
//!        | u64 dims[rank] | payload
//! ```
//!
//! Everything is little-endian with no alignment padding.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CADC";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F64(Tensor),
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F64(t) => t.shape(),
            StoredTensor::I32 { shape, .. } => shape,
        }
    }

    pub fn into_f64(self) -> Result<Tensor> {
        match self {
            StoredTensor::F64(t) => Ok(t),
            StoredTensor::I32 { shape, data } => {
                Tensor::new(shape, data.into_iter().map(f64::from).collect())
            }
        }
    }
}

pub fn write_tensor<W: Write>(mut w: W, t: &StoredTensor) -> Result<()> {
    let (dtype, shape) = match t {
        StoredTensor::F64(t) => (0u8, t.shape()),
        StoredTensor::I32 { shape, data } => {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::shape("write_tensor", shape.iter().product::<usize>(), data.len()));
            }
            (1u8, &shape[..])
        }
    };
    let rank = u8::try_from(shape.len())
        .map_err(|_| Error::Format(format!("rank {} exceeds 255", shape.len())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype, rank])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match t {
        StoredTensor::F64(t) => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        StoredTensor::I32 { data, .. } => {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<StoredTensor> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head).map_err(|_| Error::Format("truncated header".into()))?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", head[4])));
    }
    let dtype = head[5];
    let rank = head[6] as usize;
    if rank == 0 {
        return Err(Error::Format("rank 0 tensors are not supported".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| Error::Format("truncated dims".into()))?;
        let d = usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| Error::Format("dimension overflows usize".into()))?;
        shape.push(d);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("element count of {shape:?} overflows")))?;
    let elem = match dtype {
        0 => 8,
        1 => 4,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != n * elem {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {} for shape {shape:?}",
            payload.len(),
            n * elem
        )));
    }
    Ok(match dtype {
        0 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            StoredTensor::F64(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?)
        }
        _ => {
            if shape.contains(&0) {
                return Err(Error::Format(format!("zero dimension in {shape:?}")));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            StoredTensor::I32 { shape, data }
        }
    })
}

pub fn save(path: impl AsRef<Path>, t: &StoredTensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let bytes = std::fs::read(path)?;
    read_tensor(&bytes[..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = StoredTensor::I32 { shape: vec![2], data: vec![1, -1] };
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(
            buf,
            [b'C', b'A', b'D', b'C', 1, 1, 1, 2, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0xff, 0xff, 0xff, 0xff]
        );
        assert_eq!(read_tensor(&buf[..]).unwrap(), t);
    }

    #[test]
    fn rejects_malformed() {
        let t = StoredTensor::F64(Tensor::new(vec![1, 2], vec![0.5, -2.0]).unwrap());
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(read_tensor(&buf[..]).unwrap(), t);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(read_tensor(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[5] = 7;
        assert!(read_tensor(&bad[..]).is_err());
        assert!(read_tensor(&buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_tensor(&long[..]).is_err());
    }
}
