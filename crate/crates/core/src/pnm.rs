//! Binary PPM (P6) images and PGM (P5) label maps.
//!
//! Images are `3×H×W` tensors in `[0,1]`, stored as row-major interleaved
//! RGB bytes `round(v·255)`. Label maps store one class id per byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::Dimension(format!(
                "label map {height}×{width} with {} ids",
                ids.len()
            )));
        }
        Ok(LabelMap { height, width, ids })
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::Dimension(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    out.reserve(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            out.push(quantize(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.extend_from_slice(&labels.ids);
    out
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and `#` comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, "header field out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(pos - 1, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(pos - 1, "zero image extent"));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], hdr: &Header, per_pixel: usize) -> Result<&'a [u8]> {
    let need = hdr.width * hdr.height * per_pixel;
    let have = bytes.len() - hdr.data_start;
    if have < need {
        return Err(Error::format(
            bytes.len(),
            format!("truncated payload: expected {need} bytes, found {have}"),
        ));
    }
    Ok(&bytes[hdr.data_start..hdr.data_start + need])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let hdr = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &hdr, 3)?;
    let (h, w) = (hdr.height, hdr.width);
    let scale = hdr.maxval as f64;
    let mut out = vec![0.0; 3 * h * w];
    for (p, px) in data.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            out[ch * h * w + p] = f64::from(px[ch]) / scale;
        }
    }
    Tensor::new(vec![3, h, w], out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let hdr = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &hdr, 1)?;
    LabelMap::new(hdr.height, hdr.width, data.to_vec())
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crafted_two_by_two() {
        let mut bytes = b"P6\n# tiny\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert_eq!(
            t.data(),
            &[1.0, 0.0, 0.0, 0.2, 0.0, 1.0, 0.0, 0.4, 0.0, 0.0, 1.0, 0.6]
        );
    }

    #[test]
    fn black_image_is_zero_payload() {
        let bytes = encode_ppm(&Tensor::zeros(&[3, 4, 5])).unwrap();
        let hdr = b"P6\n5 4\n255\n";
        assert_eq!(&bytes[..hdr.len()], hdr);
        assert!(bytes[hdr.len()..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), hdr.len() + 60);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        match decode_ppm(b"P5\n1 1\n255\n\0") {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode_ppm(b"P6\n2 x\n255\n") {
            Err(Error::Format { offset: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        let truncated = b"P6\n2 2\n255\n\x01\x02\x03";
        match decode_ppm(truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, truncated.len()),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_pgm(b"P5\n1 1\n999\n\0"), Err(Error::Format { .. })));
    }

    #[test]
    fn labels_round_trip() {
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 0]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&l)).unwrap(), l);
    }
}
