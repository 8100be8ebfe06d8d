//! Binary PGM (P5, maxval 255) reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::image::{GrayImage, LabelGrid};

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("unsupported format {0:?}, only binary P5 is accepted")]
    UnsupportedFormat(String),
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
    #[error("unsupported maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage, PgmError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| PgmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_pgm(&bytes)
}

pub fn save_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<(), PgmError> {
    let path = path.as_ref();
    let io_err = |source| PgmError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&encode_pgm(image)).map_err(io_err)
}

/// Writes a binary mask with vessel pixels at 255.
pub fn save_label_pgm(labels: &LabelGrid, path: impl AsRef<Path>) -> Result<(), PgmError> {
    save_pgm(&labels.to_image(), path)
}

/// Loads a mask; any byte >= 128 is foreground.
pub fn load_label_pgm(path: impl AsRef<Path>) -> Result<LabelGrid, PgmError> {
    Ok(LabelGrid::from_image(&load_pgm(path)?))
}

#[inline]
pub fn quantize(value: f64) -> u8 {
    (value.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    let mut cursor = HeaderCursor { bytes, pos: 0 };
    let magic = cursor.token()?;
    if magic != b"P5" {
        return Err(PgmError::UnsupportedFormat(
            String::from_utf8_lossy(magic).into_owned(),
        ));
    }
    let width = cursor.number("width")?;
    let height = cursor.number("height")?;
    let maxval = cursor.number("maxval")?;
    if maxval != 255 {
        return Err(PgmError::UnsupportedMaxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cursor.pos) {
        Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
        _ => return Err(PgmError::MalformedHeader("missing separator after maxval")),
    }
    let (width, height) = (width as usize, height as usize);
    if width == 0 || height == 0 {
        return Err(PgmError::MalformedHeader("zero dimension"));
    }
    let expected = width * height;
    let payload = &bytes[cursor.pos..];
    if payload.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let data = payload[..expected]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok(GrayImage::new(width, height, data).expect("decoded values are in range"))
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_blank(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8], PgmError> {
        self.skip_blank();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PgmError::MalformedHeader("unexpected end of header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &'static str) -> Result<u32, PgmError> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(PgmError::MalformedHeader(what))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_bytes_map_to_unit_range() {
        let img = decode_pgm(b"P5\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn mid_byte() {
        let img = decode_pgm(b"P5 1 1 255 \x80").unwrap();
        assert!((img.data()[0] - 128.0 / 255.0).abs() < 1e-15);
        assert!((img.data()[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_pgm(b"P5\n# made by hand\n1 1\n255\n\x10").unwrap();
        assert_eq!(img.dims(), (1, 1));
    }

    #[test]
    fn distinct_parse_errors() {
        assert!(matches!(
            decode_pgm(b"P2\n1 1\n255\n0"),
            Err(PgmError::UnsupportedFormat(_))
        ));
        assert!(matches!(
            decode_pgm(b"P5\n1 x\n255\n0"),
            Err(PgmError::MalformedHeader(_))
        ));
        assert!(matches!(
            decode_pgm(b"P5\n1 1\n65535\n00"),
            Err(PgmError::UnsupportedMaxval(65535))
        ));
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\x00\x00"),
            Err(PgmError::Truncated {
                expected: 4,
                found: 2
            })
        ));
        assert!(matches!(decode_pgm(b"P5\n2"), Err(PgmError::MalformedHeader(_))));
    }

    #[test]
    fn save_load_endpoints_and_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        for value in [0.0, 1.0] {
            let img = GrayImage::filled(3, 2, value);
            save_pgm(&img, &p).unwrap();
            assert_eq!(load_pgm(&p).unwrap(), img);
        }
        let half = GrayImage::new(1, 1, vec![0.5]).unwrap();
        save_pgm(&half, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap().last(), Some(&128));
        assert!((load_pgm(&p).unwrap().data()[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let img = GrayImage::filled(1, 1, 0.0);
        assert!(matches!(
            save_pgm(&img, "/nonexistent-dir/x.pgm"),
            Err(PgmError::Io { .. })
        ));
    }
}
