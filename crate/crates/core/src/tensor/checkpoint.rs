//! `IRSW` parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "IRSW" | version u16 | blob count u32 |
//!   repeated: name_len u16 | name utf-8 | ndim u8 | dims u32 * ndim | payload f64 * prod(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IRSW";
pub const VERSION: u16 = 1;

pub fn write_blobs<W: Write>(mut w: W, blobs: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(blobs.len() as u32).to_le_bytes())?;
    for (name, t) in blobs {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
        let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Format(format!("too many dims for {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[ndim])?;
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim too large in {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_blobs<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = u16::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("bad name: {e}")))?;
        let [ndim] = read_exact::<_, 1>(&mut r)?;
        let mut dims = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let n: usize = dims.iter().product();
        let mut payload = vec![0u8; n * 8];
        r.read_exact(&mut payload)
            .map_err(|e| Error::Format(format!("truncated payload for {name}: {e}")))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        blobs.push((name, Tensor::new(&dims, data)?));
    }
    Ok(blobs)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_blobs(&mut buf, &store.named_tensors())?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    let blobs = read_blobs(bytes.as_slice())?;
    store.load_named(&blobs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let blobs = vec![("w".to_string(), Tensor::new(&[2], vec![1.0, -0.5]).unwrap())];
        let mut buf = Vec::new();
        write_blobs(&mut buf, &blobs).unwrap();
        let mut expected = b"IRSW".to_vec();
        expected.extend_from_slice(&[1, 0]);
        expected.extend_from_slice(&[1, 0, 0, 0]);
        expected.extend_from_slice(&[1, 0, b'w', 1, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_blobs(buf.as_slice()).unwrap(), blobs);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_blobs(&b"IRST\x01\x00\x00\x00\x00\x00"[..]).is_err());
        let mut buf = Vec::new();
        write_blobs(&mut buf, &[("a".into(), Tensor::zeros(&[3]))]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_blobs(buf.as_slice()), Err(Error::Format(_))));
    }
}
