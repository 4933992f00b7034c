//! Binary PPM (P6, 8-bit) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err("not a binary PPM (missing P6 magic)".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        *f = std::str::from_utf8(&bytes[start..pos]).unwrap().parse().map_err(|e| format!("{e}"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing whitespace after header".into());
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(format!("unsupported geometry {width}x{height} maxval {maxval}"));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_offset: pos + 1,
    })
}

/// `(width, height)` without decoding pixels.
pub fn ppm_size(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut buf = vec![0u8; 512];
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
    let h = parse_header(&buf[..n]).map_err(|msg| Error::Image { path: path.into(), msg })?;
    Ok((h.width, h.height))
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height;
    let body = &bytes[h.data_offset..];
    if body.len() < 3 * n {
        return Err(format!("pixel data truncated: {} of {} bytes", body.len(), 3 * n));
    }
    let mut data = vec![0.0f32; 3 * n];
    let scale = h.maxval as f32;
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = body[3 * i + c] as f32 / scale;
        }
    }
    Tensor::new(vec![3, h.height, h.width], data).map_err(|e| e.to_string())
}

/// Loads a PPM as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = super::read_file(path)?;
    decode_ppm(&bytes).map_err(|msg| Error::Image { path: path.into(), msg })
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::shape("write_ppm", "shape", format!("expected [3, H, W], got {s:?}"))),
    };
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    out.reserve(3 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push((d[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    super::write_file(path, &encode_ppm(img)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_of_quantized_values() {
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i * 4 % 256) as f32 / 255.0).collect();
        let t = Tensor::new(vec![3, 4, 5], data).unwrap();
        let back = decode_ppm(&encode_ppm(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6 # c\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0").is_err());
    }
}
