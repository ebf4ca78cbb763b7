//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        let data = fill.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn encode(magic: &str, width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    encode("P6", img.width, img.height, &img.data)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    encode("P5", img.width, img.height, &img.data)
}

fn write_bytes(path: &Path, bytes: Vec<u8>) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), encode_ppm(img))
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), encode_pgm(img))
}

/// Parses the header, returning `(width, height, maxval, payload offset)`.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Image(format!(
            "expected {} magic",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Image("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image(format!("bad header field at byte {start}")))?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Image("missing separator before raster".into()));
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!("unsupported maxval {maxval}")));
    }
    Ok((w, h, maxval, pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (width, height, _, off) = parse_header(bytes, b"P6")?;
    let need = width * height * 3;
    if bytes.len() < off + need {
        return Err(Error::Image(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len() - off
        )));
    }
    Ok(RgbImage {
        width,
        height,
        data: bytes[off..off + need].to_vec(),
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (width, height, _, off) = parse_header(bytes, b"P5")?;
    let need = width * height;
    if bytes.len() < off + need {
        return Err(Error::Image(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len() - off
        )));
    }
    Ok(GrayImage {
        width,
        height,
        data: bytes[off..off + need].to_vec(),
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_ppm(&read_bytes(path.as_ref())?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&read_bytes(path.as_ref())?)
}
