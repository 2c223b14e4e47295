//! `PTN1` tensor files: magic `PTN1`, u32 rank, rank × u64 dims, then the
//! row-major little-endian f64 payload.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const PTN_MAGIC: &[u8; 4] = b"PTN1";

#[derive(Debug, Error)]
pub enum PtnError {
    #[error("not a PTN1 stream (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("tensor header declares {0} elements, which is not addressable")]
    TooLarge(u128),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_ptn<W: Write>(w: &mut W, t: &Tensor) -> io::Result<()> {
    w.write_all(PTN_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_ptn<R: Read>(r: &mut R) -> Result<Tensor, PtnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PTN_MAGIC {
        return Err(PtnError::BadMagic(magic));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u128 = 1;
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        let d = u64::from_le_bytes(b8);
        numel = numel.saturating_mul(d as u128);
        shape.push(d as usize);
    }
    if numel > (isize::MAX as u128) / 8 {
        return Err(PtnError::TooLarge(numel));
    }
    let mut data = Vec::with_capacity(numel as usize);
    for _ in 0..numel {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Ok(Tensor::new(shape, data).expect("numel matches header"))
}

pub fn write_ptn_file(path: &Path, t: &Tensor) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ptn(&mut w, t)?;
    w.flush()
}

pub fn read_ptn_file(path: &Path) -> Result<Tensor, PtnError> {
    read_ptn(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_ptn(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"PTN1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 40);
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let t = Tensor::zeros(&[3]);
        let mut buf = Vec::new();
        write_ptn(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_ptn(&mut buf.as_slice()), Err(PtnError::Io(_))));
        assert!(matches!(read_ptn(&mut &b"PTN2xxxx"[..]), Err(PtnError::BadMagic(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(dims in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let numel: usize = dims.iter().product();
            let data: Vec<f64> = (0..numel).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            write_ptn(&mut buf, &t).unwrap();
            let back = read_ptn(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(t.shape(), back.shape());
            prop_assert_eq!(t.to_le_bytes(), back.to_le_bytes());
        }
    }
}
