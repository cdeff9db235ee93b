//! `TNSR1` binary tensor files.
//!
//! Layout: magic `TNSR`, version byte `1`, `u8` rank, `rank` little-endian
//! `u32` dimensions, then the row-major `f64` payload (little-endian).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one tensor. Truncation and bad headers are format errors.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad TNSR magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported TNSR version {}", head[4])));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        read_exact(r, &mut b, "dimensions")?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes, "payload")?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(&shape, data)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated TNSR {what}")),
        _ => Error::Format(format!("reading TNSR {what}: {e}")),
    })
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(f)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(&[2, 1], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expect = b"TNSR\x01\x02".to_vec();
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn truncation_and_bad_magic() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::zeros(&[3, 3])).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_tensor(&mut &buf[..]), Err(Error::Format(_))));
        buf[0] = b'X';
        assert!(matches!(read_tensor(&mut &buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let t = Tensor::from_fn(&shape, |i| (seed as f64 + i as f64).sin() * 1e3);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            prop_assert_eq!(read_tensor(&mut &buf[..]).unwrap(), t);
        }
    }
}
