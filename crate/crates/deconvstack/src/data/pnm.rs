//! Binary netpbm I/O: P5 graymaps and P6 pixmaps at 8-bit depth.
//!
//! Writers emit a fixed header layout (`P5\n<w> <h>\n255\n` + payload) so
//! identical inputs produce identical files. The reader accepts arbitrary
//! whitespace and `#` comments in the header, as produced by common tools,
//! and reports malformed input with the byte offset of the defect.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmKind {
    /// P5 binary graymap, 1 byte per pixel.
    Gray,
    /// P6 binary pixmap, 3 bytes per pixel.
    Rgb,
}

impl PnmKind {
    pub fn bytes_per_pixel(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }
}

/// Raw decoded pixmap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPnm {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    /// Row-major, interleaved channels for RGB.
    pub data: Vec<u8>,
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn skip_space_and_comments(&mut self) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn read_number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::format(format!("expected {what}"), start as u64));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(format!("unparseable {what}"), start as u64))
    }
}

/// Decode a P5/P6 file from raw bytes.
pub fn decode_pnm(bytes: &[u8]) -> Result<RawPnm> {
    if bytes.len() < 2 {
        return Err(Error::format("file too short for a pnm magic".to_string(), 0));
    }
    let kind = match &bytes[..2] {
        b"P5" => PnmKind::Gray,
        b"P6" => PnmKind::Rgb,
        other => {
            return Err(Error::format(
                format!("bad magic {:?}, expected P5 or P6", String::from_utf8_lossy(other)),
                0,
            ))
        }
    };
    let mut scan = HeaderScanner { bytes, pos: 2 };
    let width = scan.read_number("width")?;
    let height = scan.read_number("height")?;
    let maxval_at = scan.pos;
    let maxval = scan.read_number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!("unsupported maxval {maxval} (8-bit only)"), maxval_at as u64));
    }
    if scan.pos >= bytes.len() || !bytes[scan.pos].is_ascii_whitespace() {
        return Err(Error::format("missing whitespace before payload".to_string(), scan.pos as u64));
    }
    let payload_at = scan.pos + 1;
    let want = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(kind.bytes_per_pixel()))
        .ok_or_else(|| Error::format("pixel count overflow".to_string(), 2))?;
    let payload = &bytes[payload_at..];
    if payload.len() < want {
        return Err(Error::format(
            format!("payload truncated: have {} of {want} bytes", payload.len()),
            (payload_at + payload.len()) as u64,
        ));
    }
    Ok(RawPnm { kind, width, height, data: payload[..want].to_vec() })
}

pub fn read_pnm(path: &Path) -> Result<RawPnm> {
    decode_pnm(&std::fs::read(path)?)
}

/// Encode with the fixed header layout.
pub fn encode_pnm(img: &RawPnm) -> Vec<u8> {
    let magic = match img.kind {
        PnmKind::Gray => "P5",
        PnmKind::Rgb => "P6",
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_pnm(path: &Path, img: &RawPnm) -> Result<()> {
    debug_assert_eq!(img.data.len(), img.width * img.height * img.kind.bytes_per_pixel());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_pnm(img))?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let img = RawPnm {
            kind: PnmKind::Rgb,
            width: 3,
            height: 2,
            data: (0..18).map(|v| (v * 13 % 256) as u8).collect(),
        };
        let path = dir.path().join("x.ppm");
        write_pnm(&path, &img).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(back, img);
        // encode(decode(bytes)) reproduces our own files byte for byte
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(encode_pnm(&back), bytes);
    }

    #[test]
    fn header_comments_and_whitespace() {
        let mut bytes = b"P5 # comment\n# another\n 4\t3 #w h\n255\n".to_vec();
        bytes.extend(std::iter::repeat(7u8).take(12));
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        assert_eq!(img.kind, PnmKind::Gray);
    }

    #[test]
    fn bad_magic_rejected() {
        match decode_pnm(b"P3\n1 1\n255\n0") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend(std::iter::repeat(1u8).take(10)); // want 16
        match decode_pnm(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn sixteen_bit_depth_rejected() {
        let bytes = b"P5\n1 1\n65535\n\x00\x00".to_vec();
        assert!(matches!(decode_pnm(&bytes), Err(Error::Format { .. })));
    }
}
