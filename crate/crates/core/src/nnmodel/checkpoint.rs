//! Binary checkpoint format.
//!
//! ```text
//! magic "OTSS" | version u32 | count u32
//! count x { name_len u16 | name utf8 | rank u8 | dims u32 x rank | f32 values }
//! ```
//! All integers and floats are little-endian; values are row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OTSS";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write, T: Scalar>(
    mut out: W,
    arrays: &[(String, &Tensor<T>)],
) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::Checkpoint(format!("array name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[t.dims.len() as u8])?;
        for &d in &t.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Checkpoint(format!("{name}: dimension {d} too large")))?;
            out.write_all(&d.to_le_bytes())?;
        }
        for &v in &t.data {
            out.write_all(&v.to_f32_lossy().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Checkpoint("truncated checkpoint".into()),
        _ => Error::Stream(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        read_exact(&mut r, &mut b2)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        if !(1..=2).contains(&rank[0]) {
            return Err(Error::Checkpoint(format!(
                "{name}: unsupported rank {}",
                rank[0]
            )));
        }
        let dims = (0..rank[0])
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let mut raw = vec![0u8; len * 4];
        read_exact(&mut r, &mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.push((name, Tensor::from_vec(&dims, data)?));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok(arrays)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, arrays: &[(String, &Tensor<T>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), arrays).map_err(|e| match e {
        Error::Stream(e) => Error::io(path, e),
        other => other,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            (
                "a".into(),
                Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, -0.0])
                    .unwrap(),
            ),
            (
                "b.c".into(),
                Tensor::from_vec(&[2], vec![7.0, 8.0]).unwrap(),
            ),
        ]
    }

    fn bytes(arrays: &[(String, Tensor<f32>)]) -> Vec<u8> {
        let refs: Vec<(String, &Tensor<f32>)> =
            arrays.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &refs).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let arrays = sample();
        let buf = bytes(&arrays);
        assert_eq!(&buf[..4], b"OTSS");
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in arrays.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.dims, t2.dims);
            let b1: Vec<u32> = t1.data.iter().map(|x| x.to_bits()).collect();
            let b2: Vec<u32> = t2.data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn rejects_corruption() {
        let buf = bytes(&sample());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..])
            .unwrap_err()
            .to_string()
            .contains("bad magic"));
        let err = read_checkpoint(&buf[..buf.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
