//! Binary PPM (P6, 8-bit RGB) and PGM (P5, 16-bit big-endian depth in mm).

use std::path::Path;

use crate::data::DepthSample;
use crate::error::{Error, Result};

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    /// Offset of the first payload byte.
    data_start: usize,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| parse_err(start, format!("invalid {what}")))
    }
}

fn header(buf: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(parse_err(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut c = Cursor { buf, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    match buf.get(c.pos) {
        Some(b' ' | b'\t' | b'\n' | b'\r') => {}
        _ => return Err(parse_err(c.pos, "expected a single whitespace byte after maxval")),
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_start: c.pos + 1,
    })
}

fn payload<'a>(buf: &'a [u8], h: &Header, bytes_per_px: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * bytes_per_px;
    let have = buf.len() - h.data_start;
    if have < need {
        return Err(parse_err(
            buf.len(),
            format!("truncated payload: {have} of {need} bytes"),
        ));
    }
    Ok(&buf[h.data_start..h.data_start + need])
}

/// Decodes a P6 file with maxval 255 into `(height, width, rgb)` with
/// values in `[0, 1]`.
pub fn decode_ppm(buf: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let h = header(buf, b"P6")?;
    if h.maxval != 255 {
        return Err(parse_err(h.data_start - 1, format!("maxval {} (need 255)", h.maxval)));
    }
    let data = payload(buf, &h, 3)?;
    Ok((h.height, h.width, data.iter().map(|&b| b as f32 / 255.0).collect()))
}

pub fn encode_ppm(height: usize, width: usize, rgb: &[f32]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Decodes a P5 file with maxval 65535 into `(height, width, meters)`.
pub fn decode_pgm16(buf: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let h = header(buf, b"P5")?;
    if h.maxval != 65535 {
        return Err(parse_err(h.data_start - 1, format!("maxval {} (need 65535)", h.maxval)));
    }
    let data = payload(buf, &h, 2)?;
    let depth = data
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 1000.0)
        .collect();
    Ok((h.height, h.width, depth))
}

/// Depth in meters, stored as rounded millimeters.
pub fn encode_pgm16(height: usize, width: usize, meters: &[f32]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &d in meters {
        let mm = (d as f64 * 1000.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&mm.to_be_bytes());
    }
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    decode_ppm(&read(path)?)
}

pub fn write_ppm(path: &Path, height: usize, width: usize, rgb: &[f32]) -> Result<()> {
    write(path, &encode_ppm(height, width, rgb))
}

pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    decode_pgm16(&read(path)?)
}

pub fn write_pgm16(path: &Path, height: usize, width: usize, meters: &[f32]) -> Result<()> {
    write(path, &encode_pgm16(height, width, meters))
}

pub fn load_sample(rgb_path: &Path, depth_path: &Path) -> Result<DepthSample> {
    let (h, w, rgb) = read_ppm(rgb_path)?;
    let (dh, dw, depth) = read_pgm16(depth_path)?;
    if (h, w) != (dh, dw) {
        return Err(Error::dim("load_sample", &[h, w], &[dh, dw]));
    }
    DepthSample::new(h, w, rgb, depth)
}

pub fn save_sample(sample: &DepthSample, rgb_path: &Path, depth_path: &Path) -> Result<()> {
    write_ppm(rgb_path, sample.height, sample.width, &sample.rgb)?;
    write_pgm16(depth_path, sample.height, sample.width, &sample.depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn millimeters_to_meters() {
        let mut buf = b"P5\n2 1\n65535\n".to_vec();
        buf.extend_from_slice(&5000u16.to_be_bytes());
        buf.extend_from_slice(&0u16.to_be_bytes());
        let (h, w, d) = decode_pgm16(&buf).unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(d, vec![5.0, 0.0]);
        let s = DepthSample::new(1, 2, vec![0.0; 6], d).unwrap();
        assert_eq!(s.valid, vec![true, false]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut buf = b"P6 # made by hand\n1 # width\n1\n255\n".to_vec();
        buf.extend_from_slice(&[255, 0, 51]);
        let (_, _, rgb) = decode_ppm(&buf).unwrap();
        assert_eq!(rgb, vec![1.0, 0.0, 0.2]);
    }

    #[test]
    fn errors_name_the_offset() {
        match decode_ppm(b"P6\n2 2\n255\n\x01\x02") {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 13);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        match decode_ppm(b"P6\n2 x\n255\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode_pgm16(b"P6\n1 1\n255\n"),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n\0\0\0"),
            Err(Error::Parse { offset: 12, .. })
        ));
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (rgb, depth) = (dir.path().join("a.ppm"), dir.path().join("a.pgm"));
        write_ppm(&rgb, 2, 2, &[0.5; 12]).unwrap();
        write_pgm16(&depth, 2, 3, &[1.0; 6]).unwrap();
        assert!(matches!(load_sample(&rgb, &depth), Err(Error::Dimension { .. })));
    }

    #[test]
    fn file_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (rgb, depth) = (dir.path().join("s.ppm"), dir.path().join("s.pgm"));
        let s = DepthSample::new(
            2,
            3,
            (0..18).map(|i| (i * 13 % 256) as f32 / 255.0).collect(),
            vec![0.0, 0.5, 1.234, 9.999, 65.535, 3.0],
        )
        .unwrap();
        save_sample(&s, &rgb, &depth).unwrap();
        let back = load_sample(&rgb, &depth).unwrap();
        assert_eq!(back, s);
        save_sample(&back, &rgb, &depth).unwrap();
        assert_eq!(load_sample(&rgb, &depth).unwrap(), back);
    }
}
