//! Binary NetPBM readers and writers: P6 (PPM) for RGB images, P5 (PGM)
//! for grayscale payloads such as label masks.
//!
//! Images round-trip losslessly because the episode generator quantizes
//! every channel to the k/255 grid before anything is written.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses "P5"/"P6" headers: magic, width, height, maxval, separated by
/// whitespace with `#` comments, followed by a single whitespace byte and
/// the binary payload. Returns (width, height, payload offset).
fn parse_header(data: &[u8], magic: &[u8], path: &Path) -> Result<(usize, usize, usize)> {
    if data.len() < 2 || &data[..2] != magic {
        return Err(Error::format(
            path,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        let text = std::str::from_utf8(&data[start..pos]).expect("digits are ascii");
        *field = text
            .parse()
            .map_err(|_| Error::format(path, "header field out of range"))?;
    }
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing separator before payload"));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    Ok((w, h, pos))
}

/// Writes an HxWx3 tensor with values in [0, 1] as a binary PPM.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    if img.shape().len() != 3 || img.shape()[2] != 3 {
        return Err(Error::invalid("write_ppm: expected HxWx3 tensor".to_string()));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut buf = Vec::with_capacity(h * w * 3 + 32);
    write!(buf, "P6\n{w} {h}\n255\n").expect("vec write");
    for &v in img.data() {
        buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a binary PPM into an HxWx3 tensor with values k/255.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let data = read_file(path)?;
    let (w, h, offset) = parse_header(&data, b"P6", path)?;
    let need = w * h * 3;
    let payload = data
        .get(offset..offset + need)
        .ok_or_else(|| Error::format(path, "payload shorter than header promises"))?;
    let values: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h, w, 3], values)
}

/// Writes a label mask as a binary PGM, pixel value = class label.
pub fn write_pgm(path: &Path, mask: &LabelMask) -> Result<()> {
    let (h, w) = mask.dims();
    let mut buf = Vec::with_capacity(h * w + 32);
    write!(buf, "P5\n{w} {h}\n255\n").expect("vec write");
    buf.extend_from_slice(mask.labels());
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM as a label mask.
pub fn read_pgm(path: &Path) -> Result<LabelMask> {
    let data = read_file(path)?;
    let (w, h, offset) = parse_header(&data, b"P5", path)?;
    let need = w * h;
    let payload = data
        .get(offset..offset + need)
        .ok_or_else(|| Error::format(path, "payload shorter than header promises"))?;
    LabelMask::new(h, w, payload.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn ppm_roundtrip_is_lossless_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut rng = Rng::new(1);
        let data: Vec<f64> = (0..4 * 5 * 3)
            .map(|_| (rng.range_f64(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        let img = Tensor::new(vec![4, 5, 3], data).unwrap();
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(img.shape(), back.shape());
        assert_eq!(img.data(), back.data());
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let mask = LabelMask::new(3, 2, vec![0, 1, 2, 0, 1, 2]).unwrap();
        write_pgm(&path, &mask).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), mask);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 1\n255\n\x01\x02").unwrap();
        let mask = read_pgm(&path).unwrap();
        assert_eq!(mask.labels(), &[1, 2]);
    }

    #[test]
    fn bad_magic_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P3\n1 1\n255\n\x00\x00\x00").unwrap();
        let err = read_ppm(&path).unwrap_err();
        assert!(err.to_string().contains("bad.ppm"));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
