//! `IRST` tensor container.
//!
//! ```text
//! magic "IRST" | version u16 | dtype u8 (0 = f32, 1 = f64) | ndim u8 |
//!   dims u32 * ndim | payload, row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IRST";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor, dtype: Dtype) -> Result<()> {
    let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Format("too many dimensions".into()))?;
    let mut buf = Vec::with_capacity(8 + 4 * t.ndim() + 8 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(dtype.code());
    buf.push(ndim);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len());
    let Some(end) = end else {
        return Err(Error::Format(format!("truncated container at byte {at}")));
    };
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != MAGIC {
        return Err(Error::Format("bad container magic".into()));
    }
    let version = u16::from_le_bytes(take(bytes, &mut at, 2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let dtype = match take(bytes, &mut at, 1)?[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        c => return Err(Error::Format(format!("unknown dtype code {c}"))),
    };
    let ndim = take(bytes, &mut at, 1)?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes")) as usize);
    }
    let numel: usize = dims.iter().product();
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let payload = take(bytes, &mut at, numel * width)?;
    if at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - at
        )));
    }
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Tensor::new(&dims, data)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_tensor(&mut w, t, Dtype::F64)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    read_tensor(std::fs::File::open(path)?)
}
