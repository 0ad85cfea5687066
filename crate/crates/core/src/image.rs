//! Images as `(height, width, 3)` tensors in `[0, 1]`, and binary PPM (P6) I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIZE: usize = 32;
pub const CHANNELS: usize = 3;

pub fn check_image(t: &Tensor) -> Result<()> {
    let expected = vec![SIZE, SIZE, CHANNELS];
    if t.shape() != expected.as_slice() {
        return Err(Error::BadResolution {
            expected,
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn check_range(t: &Tensor) -> Result<()> {
    match t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::OutOfRange(format!("pixel value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

pub fn to_ppm(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() != 3 || t.shape()[2] != 3 {
        return Err(Error::shape("ppm", format!("need (h, w, 3), got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn from_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Format(format!("PPM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ascii"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit maxval 255 is supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h * 3 {
        return Err(bad("payload size does not match header"));
    }
    Tensor::new(vec![h, w, 3], data.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn write_ppm(path: &Path, t: &Tensor) -> Result<()> {
    crate::store::write_bytes(path, &to_ppm(t)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_ppm(&bytes)
}

/// Rounds values to the nearest 8-bit level, as a PPM round trip would.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Places equally sized images side by side with a one-pixel white gutter.
pub fn montage(rows: &[Vec<Tensor>]) -> Result<Tensor> {
    let ncols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    if rows.is_empty() || ncols == 0 {
        return Err(Error::shape("montage", "no images"));
    }
    let (h, w) = (rows[0][0].shape()[0], rows[0][0].shape()[1]);
    let (hh, ww) = (rows.len() * (h + 1) + 1, ncols * (w + 1) + 1);
    let mut out = vec![1.0f32; hh * ww * 3];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            if img.shape() != [h, w, 3] {
                return Err(Error::shape("montage", format!("{:?}", img.shape())));
            }
            let (oy, ox) = (1 + ri * (h + 1), 1 + ci * (w + 1));
            for y in 0..h {
                let src = &img.data()[y * w * 3..(y + 1) * w * 3];
                let dst = ((oy + y) * ww + ox) * 3;
                out[dst..dst + w * 3].copy_from_slice(src);
            }
        }
    }
    Tensor::new(vec![hh, ww, 3], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_exact_on_quantized_values() {
        let data: Vec<f32> = (0..SIZE * SIZE * 3).map(|i| (i % 256) as f32 / 255.0).collect();
        let t = Tensor::new(vec![SIZE, SIZE, 3], data).unwrap();
        let bytes = to_ppm(&t).unwrap();
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(from_ppm(&bytes).unwrap(), t);
    }

    #[test]
    fn rejects_wrong_resolution() {
        let t = Tensor::zeros(vec![16, 16, 3]);
        assert!(matches!(check_image(&t), Err(Error::BadResolution { .. })));
    }
}
