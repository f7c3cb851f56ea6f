//! RGB image buffers and the binary PPM/PGM codec.

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, interleaved `r, g, b`.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Data(format!(
                "image dimensions must be >= 1, got {width}x{height}"
            )));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::Data(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(ImageBuffer { width, height, pixels })
    }

    /// Single-colour image.
    pub fn solid(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(3 * width * height).collect();
        ImageBuffer::new(width, height, pixels)
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

    pub fn get(&self, x: usize, y: usize, channel: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + channel]
    }
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.width, self.height)
    }
}

/// Encodes as binary PPM (`P6`, maxval 255).
pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("missing or invalid {what} in header"))
    }
}

/// Decodes binary PPM (`P6`) or PGM (`P5`); grey levels are replicated to RGB.
/// Samples are rescaled to 0..=255 when maxval differs from 255.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err("not a binary PPM/PGM file (expected P6 or P5 magic)".into()),
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("invalid dimensions {width}x{height}"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("invalid maxval {maxval}"));
    }
    if !bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    let data = &bytes[r.pos + 1..];
    let sample_bytes = if maxval > 255 { 2 } else { 1 };
    let samples = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or("dimensions overflow")?;
    let needed = samples * sample_bytes;
    if data.len() < needed {
        return Err(format!(
            "truncated pixel data: need {needed} bytes, found {}",
            data.len()
        ));
    }
    let scale = |v: usize| -> u8 {
        if maxval == 255 {
            v as u8
        } else {
            ((v.min(maxval) * 255 + maxval / 2) / maxval) as u8
        }
    };
    let values: Vec<u8> = if sample_bytes == 1 {
        data[..needed].iter().map(|&v| scale(v as usize)).collect()
    } else {
        data[..needed]
            .chunks_exact(2)
            .map(|p| scale(u16::from_be_bytes([p[0], p[1]]) as usize))
            .collect()
    };
    let pixels = if channels == 3 {
        values
    } else {
        values.iter().flat_map(|&g| [g, g, g]).collect()
    };
    ImageBuffer::new(width, height, pixels).map_err(|e| e.to_string())
}

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?
        .to_rgb8();
    let (w, h) = img.dimensions();
    ImageBuffer::new(w as usize, h as usize, img.into_raw()).map_err(|e| e.to_string())
}

#[cfg(not(feature = "png"))]
fn decode_png(_: &[u8]) -> std::result::Result<ImageBuffer, String> {
    Err("PNG support is not enabled in this build".into())
}

/// Decodes an image file by content (PPM/PGM, or PNG when enabled).
/// Unreadable files are I/O errors; unparseable ones are decode errors.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let decoded = if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(&bytes)
    } else {
        decode_ppm(&bytes)
    };
    decoded.map_err(|reason| Error::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn save_ppm(img: &ImageBuffer, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img))?;
    Ok(())
}
