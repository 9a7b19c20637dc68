//! Binary Netpbm images: P6 (RGB) and P5 (grayscale), maxval 255 only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit interleaved RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

macro_rules! image_impl {
    ($ty:ident, $channels:expr) => {
        impl $ty {
            pub const CHANNELS: usize = $channels;

            pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
                if width == 0 || height == 0 {
                    return Err(Error::ImageFormat(format!(
                        "image dimensions must be positive, got {width}×{height}"
                    )));
                }
                if pixels.len() != width * height * $channels {
                    return Err(Error::ImageFormat(format!(
                        "{}×{} image needs {} bytes, got {}",
                        width,
                        height,
                        width * height * $channels,
                        pixels.len()
                    )));
                }
                Ok($ty {
                    width,
                    height,
                    pixels,
                })
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn pixels(&self) -> &[u8] {
                &self.pixels
            }

            pub fn pixels_mut(&mut self) -> &mut [u8] {
                &mut self.pixels
            }
        }
    };
}

image_impl!(RgbImage, 3);
image_impl!(GrayImage, 1);

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    payload_start: usize,
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | b'\x0b' | b'\x0c')
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::ImageFormat("missing Netpbm magic number".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and `#` comments may precede every header field.
        loop {
            match bytes.get(pos) {
                Some(&b) if is_space(b) => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::ImageFormat("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::ImageFormat(format!(
                "expected a decimal number in the header at byte {start}"
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::ImageFormat("header number out of range".into()))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(&b) if is_space(b) => pos += 1,
        _ => return Err(Error::ImageFormat("truncated header".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!(
            "only maxval 255 is supported, got {maxval}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::ImageFormat(format!(
            "image dimensions must be positive, got {width}×{height}"
        )));
    }
    Ok(Header {
        magic,
        width,
        height,
        payload_start: pos,
    })
}

fn decode(bytes: &[u8], want: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() >= 2 && bytes[0] == b'P' && &bytes[..2] != want {
        return Err(Error::ImageFormat(format!(
            "unsupported Netpbm format {}, expected binary {}",
            String::from_utf8_lossy(&bytes[..2]),
            String::from_utf8_lossy(want)
        )));
    }
    let h = parse_header(bytes)?;
    debug_assert_eq!(&h.magic, want);
    let len = h.width * h.height * channels;
    let payload = &bytes[h.payload_start..];
    if payload.len() < len {
        return Err(Error::ImageFormat(format!(
            "truncated raster: expected {len} bytes, found {}",
            payload.len()
        )));
    }
    Ok((h.width, h.height, payload[..len].to_vec()))
}

fn encode(magic: &str, width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, px) = decode(bytes, b"P6", 3)?;
    RgbImage::new(w, h, px)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (w, h, px) = decode(bytes, b"P5", 1)?;
    GrayImage::new(w, h, px)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    encode("P6", img.width, img.height, &img.pixels)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    encode("P5", img.width, img.height, &img.pixels)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::ImageFormat(msg) => Error::ImageFormat(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    with_path(path, decode_ppm(&read_file(path)?))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    with_path(path, decode_pgm(&read_file(path)?))
}

pub fn write_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}
