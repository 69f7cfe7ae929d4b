//! Binary NetPBM: P5 (grayscale) and P6 (RGB), 8- or 16-bit samples.
//!
//! Samples wider than 8 bits are stored big-endian, as NetPBM requires.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PnmError {
    #[error("unsupported magic {0:?} (expected P5 or P6)")]
    Magic(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported maxval {0}")]
    Maxval(u32),
    #[error("raster truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// A decoded image; `data` is row-major with channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl PnmImage {
    pub fn gray(width: usize, height: usize, maxval: u16, data: Vec<u16>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            channels: 1,
            maxval,
            data,
        }
    }

    pub fn rgb(width: usize, height: usize, maxval: u16, data: Vec<u16>) -> Self {
        assert_eq!(data.len(), 3 * width * height);
        Self {
            width,
            height,
            channels: 3,
            maxval,
            data,
        }
    }

    /// Encodes as P5 or P6 according to `channels`.
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            out.reserve(self.data.len() * 2);
            for &v in &self.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
        } else {
            out.extend(self.data.iter().map(|&v| v as u8));
        }
        out
    }
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&c) = self.buf.get(self.pos) {
            if c == b'#' {
                while self.buf.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, PnmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PnmError::Header(format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| PnmError::Header(format!("{what} out of range")))
    }
}

pub fn decode(buf: &[u8]) -> Result<PnmImage, PnmError> {
    if buf.len() < 2 {
        return Err(PnmError::Header("file too short".into()));
    }
    let channels = match &buf[..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => return Err(PnmError::Magic(String::from_utf8_lossy(other).into_owned())),
    };
    let mut h = Header { buf, pos: 2 };
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PnmError::Header(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(PnmError::Maxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match buf.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(PnmError::Header("missing whitespace after maxval".into())),
    }
    let samples = width * height * channels;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let raster = &buf[h.pos..];
    if raster.len() < samples * bytes_per {
        return Err(PnmError::Truncated {
            expected: samples * bytes_per,
            found: raster.len(),
        });
    }
    let data: Vec<u16> = if bytes_per == 2 {
        raster[..samples * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        raster[..samples].iter().map(|&b| b as u16).collect()
    };
    Ok(PnmImage {
        width,
        height,
        channels,
        maxval: maxval as u16,
        data,
    })
}
