//! 8-bit image files. Binary PGM (P5) and PPM (P6) are handled here
//! directly; PNG goes through the `png` crate. Pixel values are scaled to
//! [0, 1] on read; on write they are clipped and rounded half-up.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Netpbm,
    Png,
}

impl ImageFormat {
    /// Pick a format from the file extension (`.png`, otherwise Netpbm).
    pub fn from_path(path: &Path) -> ImageFormat {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(ext) if ext == "png" => ImageFormat::Png,
            _ => ImageFormat::Netpbm,
        }
    }
}

/// Clip to [0, 1] and quantize with round-half-up.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Read an image; the format is detected from its leading bytes.
pub fn read_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else {
        decode_netpbm(bytes)
    }
}

/// Write an image; `.png` selects PNG, anything else Netpbm (P5 for one
/// channel, P6 for three).
pub fn write_image<T: Scalar>(img: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path) {
        ImageFormat::Png => encode_png(img)?,
        ImageFormat::Netpbm => encode_netpbm(img)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_writable<T: Scalar>(img: &Tensor<T>) -> Result<Shape> {
    let s = img.shape();
    if s.n != 1 || (s.c != 1 && s.c != 3) || s.h == 0 || s.w == 0 {
        return Err(Error::param(format!("cannot store a {s} tensor as an image")));
    }
    Ok(s)
}

/// Interleaved bytes in row-major order.
fn interleave<T: Scalar>(img: &Tensor<T>, s: Shape) -> Vec<u8> {
    let mut out = Vec::with_capacity(s.c * s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                out.push(to_byte(img.at(0, c, y, x).f64()));
            }
        }
    }
    out
}

fn deinterleave<T: Scalar>(raw: &[u8], c: usize, h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(Shape::new(1, c, h, w), |_, ch, y, x| {
        T::of(raw[(y * w + x) * c + ch] as f64 / 255.0)
    })
}

pub fn encode_netpbm<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let s = check_writable(img)?;
    let magic = if s.c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(interleave(img, s));
    Ok(out)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&b) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if b == b'\n' || b == b'\r' {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start as u64, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(start as u64, format!("{what} out of range")))
    }
}

pub fn decode_netpbm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::format(0, "not a binary PGM/PPM file (expected P5 or P6)")),
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    if !r.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(Error::format(2, "expected whitespace after magic number"));
    }
    let w = r.number("width")?;
    let h = r.number("height")?;
    let maxval_at = r.pos;
    let maxval = r.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::format(maxval_at as u64, "image has zero size"));
    }
    if maxval != 255 {
        return Err(Error::format(
            maxval_at as u64,
            format!("unsupported maxval {maxval} (only 255)"),
        ));
    }
    if !r.bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(r.pos as u64, "expected a single whitespace before pixel data"));
    }
    let start = r.pos + 1;
    let need = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::format(start as u64, "image dimensions overflow"))?;
    let available = bytes.len() - start;
    if available < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("pixel data truncated: need {need} bytes, found {available}"),
        ));
    }
    Ok(deinterleave(&bytes[start..start + need], channels, h, w))
}

pub fn encode_png<T: Scalar>(img: &Tensor<T>) -> Result<Vec<u8>> {
    let s = check_writable(img)?;
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, s.w as u32, s.h as u32);
    enc.set_color(if s.c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Unsupported(format!("PNG encoding failed: {e}"));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&interleave(img, s)).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(out)
}

/// Decode PNG to one or three channels; alpha is dropped and 16-bit
/// samples are reduced to 8 bits.
pub fn decode_png<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let png_err = |e: png::DecodingError| Error::format(0, format!("PNG: {e}"));
    let mut dec = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(0, "PNG image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::format(0, "indexed PNG was not expanded")),
    };
    let mut raw = Vec::with_capacity(w * h * keep);
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            raw.extend_from_slice(&row[x * stride..x * stride + keep]);
        }
    }
    Ok(deinterleave(&raw, keep, h, w))
}
