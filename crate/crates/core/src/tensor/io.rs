//! The `TNSR` raw tensor format.
//!
//! Layout: magic `TNSR`, `u8` version (1), `u8` rank, `rank` little-endian
//! `u32` extents, then the little-endian `f32` payload in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &s in t.shape() {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let mut head = [0u8; 6];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("TNSR header truncated".into()))?;
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
        r.read_exact(&mut b)
            .map_err(|_| Error::Format("TNSR extents truncated".into()))?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    if r.len() != 4 * n {
        return Err(Error::Format(format!("TNSR payload has {} bytes, expected {}", r.len(), 4 * n)));
    }
    let data = r
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"TNSR");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &3u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 14 + 24);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"TNSX\x01\x01\x01\x00\x00\x00").is_err());
        assert!(decode(b"TNSR\x02\x01\x01\x00\x00\x00").is_err());
        assert!(decode(b"TNSR\x01\x01\x02\x00\x00\x00\x00\x00\x00\x00").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(shape, 3.0, &mut rng);
            prop_assert_eq!(decode(&encode(&t)).unwrap(), t);
        }
    }
}
