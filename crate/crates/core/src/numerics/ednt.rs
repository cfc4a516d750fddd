//! EDNT v1 tensor files.
//!
//! ```text
//! "EDNT" | version u8 = 1 | dtype u8 | rank u8 | count u64 LE
//!        | rank x dim u32 LE | scale f64 LE | bit image, byte-padded
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{decode_bits, encode_bits, BitImage, Dtype, Tensor};

const MAGIC: &[u8; 4] = b"EDNT";
const VERSION: u8 = 1;

pub fn write_ednt<W: Write>(t: &Tensor, mut w: W) -> Result<()> {
    let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, t.dtype().code(), rank])?;
    w.write_all(&(t.len() as u64).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&t.scale().to_le_bytes())?;
    w.write_all(encode_bits(t).bytes())?;
    Ok(())
}

pub fn read_ednt<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad EDNT magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported EDNT version {}", head[4])));
    }
    let dtype = Dtype::from_code(head[5])?;
    let rank = head[6] as usize;
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8);
    let mut shape = Vec::with_capacity(rank);
    let mut buf4 = [0u8; 4];
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    if shape.iter().map(|&d| d as u64).product::<u64>() != count {
        return Err(Error::Format(format!("element count {count} disagrees with shape {shape:?}")));
    }
    r.read_exact(&mut buf8)?;
    let scale = f64::from_le_bytes(buf8);
    let count = usize::try_from(count).map_err(|_| Error::Format("element count overflow".into()))?;
    let mut bytes = vec![0u8; (count * dtype.bits() as usize).div_ceil(8)];
    r.read_exact(&mut bytes)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after EDNT payload".into()));
    }
    let img = BitImage::from_bytes(bytes, dtype.bits(), count)?;
    let t = decode_bits(&img, dtype, &shape, scale)?;
    if dtype == Dtype::Fp32 && scale.to_bits() != 1f64.to_bits() {
        return Err(Error::Format(format!("fp32 tensor must carry scale 1, found {scale}")));
    }
    Ok(t)
}

pub fn write_ednt_file(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ednt(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_ednt_file(path: impl AsRef<Path>) -> Result<Tensor> {
    read_ednt(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_codes(Dtype::Int4, vec![3, 1], vec![-1, 2, 7], 0.5).unwrap();
        let mut out = Vec::new();
        write_ednt(&t, &mut out).unwrap();
        let mut expected = b"EDNT".to_vec();
        expected.extend([1, 0, 2]);
        expected.extend(3u64.to_le_bytes());
        expected.extend(3u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(0.5f64.to_le_bytes());
        expected.extend([0x2F, 0x07]);
        assert_eq!(out, expected);
        assert_eq!(read_ednt(&out[..]).unwrap(), t);
    }

    #[test]
    fn fp32_roundtrip_and_corruption_detection() {
        let t = Tensor::from_f32(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap();
        let mut out = Vec::new();
        write_ednt(&t, &mut out).unwrap();
        assert_eq!(out.len(), 7 + 8 + 8 + 8 + 16);
        assert_eq!(read_ednt(&out[..]).unwrap(), t);

        let mut bad = out.clone();
        bad[0] = b'X';
        assert!(read_ednt(&bad[..]).is_err());
        let mut long = out.clone();
        long.push(0);
        assert!(read_ednt(&long[..]).is_err());
        assert!(read_ednt(&out[..out.len() - 1]).is_err());
    }
}
