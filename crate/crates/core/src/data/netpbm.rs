//! Binary Netpbm (P5 gray, P6 RGB), maxval 255 only.

use std::path::Path;

use super::ImageBuffer;
use crate::error::{Error, NetpbmError, Result};

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if is_space(b) {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, NetpbmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(NetpbmError::BadHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| NetpbmError::BadHeader(format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ImageBuffer, NetpbmError> {
    let magic = bytes.get(..2).unwrap_or(bytes);
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(NetpbmError::BadMagic(String::from_utf8_lossy(magic).into_owned())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(NetpbmError::BadHeader(format!("zero dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(NetpbmError::BadMaxval(maxval));
    }
    match bytes.get(h.pos) {
        Some(&b) if is_space(b) => h.pos += 1,
        _ => return Err(NetpbmError::BadHeader("no whitespace after maxval".into())),
    }
    let expected = width * height * channels;
    let payload = &bytes[h.pos..];
    if payload.len() < expected {
        return Err(NetpbmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    Ok(ImageBuffer::new(width, height, channels, payload[..expected].to_vec()).expect("dims checked"))
}

/// Canonical encoding: `P5\n<w> <h>\n255\n` followed by the raster.
pub fn encode(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.samples());
    out
}

pub fn read_netpbm(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io("data", "read_netpbm", path, e))?;
    decode(&bytes).map_err(|source| Error::Netpbm {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_netpbm(img: &ImageBuffer, path: &Path) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io("data", "write_netpbm", path, e))
}
