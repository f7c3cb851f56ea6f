//! Geometric and photometric image transforms.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::image::ImageBuffer;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear sample of channel `c` at continuous coordinates, clamped to the
/// image edge.
fn sample_bilinear(img: &ImageBuffer, sx: f32, sy: f32, c: usize) -> f32 {
    let max_x = (img.width() - 1) as f32;
    let max_y = (img.height() - 1) as f32;
    let sx = sx.clamp(0.0, max_x);
    let sy = sy.clamp(0.0, max_y);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let fx = sx - x0 as f32;
    let fy = sy - y0 as f32;
    let p = |x, y| img.get(x, y, c) as f32;
    let top = p(x0, y0) + (p(x1, y0) - p(x0, y0)) * fx;
    let bottom = p(x0, y1) + (p(x1, y1) - p(x0, y1)) * fx;
    top + (bottom - top) * fy
}

/// Bilinear resize with half-pixel centres: destination pixel `d` samples
/// source coordinate `(d + 0.5) * in / out - 0.5`, clamped to the image.
pub fn resize_bilinear(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Config(format!(
            "resize target must be >= 1x1, got {out_w}x{out_h}"
        )));
    }
    if (out_w, out_h) == (img.width(), img.height()) {
        return Ok(img.clone());
    }
    let scale_x = img.width() as f32 / out_w as f32;
    let scale_y = img.height() as f32 / out_h as f32;
    let mut pixels = Vec::with_capacity(3 * out_w * out_h);
    for dy in 0..out_h {
        let sy = (dy as f32 + 0.5) * scale_y - 0.5;
        for dx in 0..out_w {
            let sx = (dx as f32 + 0.5) * scale_x - 0.5;
            for c in 0..3 {
                pixels.push(to_u8(sample_bilinear(img, sx, sy, c)));
            }
        }
    }
    ImageBuffer::new(out_w, out_h, pixels)
}

/// Copies the `w x h` window whose top-left corner is `(x0, y0)`.
pub fn crop(img: &ImageBuffer, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageBuffer> {
    if x0 + w > img.width() || y0 + h > img.height() {
        return Err(Error::Config(format!(
            "crop {w}x{h}+{x0}+{y0} exceeds {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let mut pixels = Vec::with_capacity(3 * w * h);
    for y in y0..y0 + h {
        let start = (y * img.width() + x0) * 3;
        pixels.extend_from_slice(&img.pixels()[start..start + 3 * w]);
    }
    ImageBuffer::new(w, h, pixels)
}

pub fn flip_horizontal(img: &ImageBuffer) -> ImageBuffer {
    let w = img.width();
    let mut pixels = Vec::with_capacity(img.pixels().len());
    for row in img.pixels().chunks(3 * w) {
        for px in row.chunks(3).rev() {
            pixels.extend_from_slice(px);
        }
    }
    ImageBuffer::new(w, img.height(), pixels).expect("flip preserves dimensions")
}

/// Rotates counter-clockwise by `degrees` about the image centre, sampling
/// bilinearly and clamping to the nearest edge outside the source.
pub fn rotate(img: &ImageBuffer, degrees: f32) -> ImageBuffer {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (img.width() as f32 - 1.0) / 2.0;
    let cy = (img.height() as f32 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(img.pixels().len());
    for y in 0..img.height() {
        let dy = y as f32 - cy;
        for x in 0..img.width() {
            let dx = x as f32 - cx;
            // Inverse map: rotate the destination offset back by -degrees.
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            for c in 0..3 {
                pixels.push(to_u8(sample_bilinear(img, sx, sy, c)));
            }
        }
    }
    ImageBuffer::new(img.width(), img.height(), pixels).expect("rotation preserves dimensions")
}

pub fn scale_brightness(img: &ImageBuffer, factor: f32) -> ImageBuffer {
    let pixels = img.pixels().iter().map(|&v| to_u8(v as f32 * factor)).collect();
    ImageBuffer::new(img.width(), img.height(), pixels).expect("brightness preserves dimensions")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_rotation_deg: f32,
    /// Crop side as a fraction of the image side, sampled from `[min, max]`.
    pub scale_jitter: (f32, f32),
    /// Brightness factor is sampled from `[1 - b, 1 + b]`.
    pub brightness_jitter: f32,
    /// Mirror with probability 1/2.
    pub horizontal_flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            max_rotation_deg: 10.0,
            scale_jitter: (0.9, 1.0),
            brightness_jitter: 0.1,
            horizontal_flip: false,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_jitter;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "scale jitter must satisfy 0 < min <= max <= 1, got {lo}..{hi}"
            )));
        }
        let rotation_ok = self.max_rotation_deg >= 0.0;
        if !rotation_ok || !(0.0..1.0).contains(&self.brightness_jitter) {
            return Err(Error::Config(
                "rotation must be >= 0 and brightness jitter in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Random scale-crop, rotation, brightness and optional flip, in that order.
/// A pure function of `(img, config, seed)`.
pub fn augment(img: &ImageBuffer, config: &AugmentConfig, seed: u64) -> Result<ImageBuffer> {
    config.validate()?;
    if !config.enabled {
        return Ok(img.clone());
    }
    let mut rng = rng_from_seed(seed);
    // Draw every variate up front so the stream does not depend on which
    // steps end up being no-ops.
    let u_scale: f32 = rng.random();
    let u_x: f32 = rng.random();
    let u_y: f32 = rng.random();
    let u_angle: f32 = rng.random();
    let u_bright: f32 = rng.random();
    let u_flip: f32 = rng.random();

    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();

    let (lo, hi) = config.scale_jitter;
    let s = lo + (hi - lo) * u_scale;
    let cw = ((w as f32 * s).round() as usize).clamp(1, w);
    let ch = ((h as f32 * s).round() as usize).clamp(1, h);
    if (cw, ch) != (w, h) {
        let x0 = ((u_x * (w - cw + 1) as f32) as usize).min(w - cw);
        let y0 = ((u_y * (h - ch + 1) as f32) as usize).min(h - ch);
        out = resize_bilinear(&crop(&out, x0, y0, cw, ch)?, w, h)?;
    }

    let angle = config.max_rotation_deg * (2.0 * u_angle - 1.0);
    if angle != 0.0 {
        out = rotate(&out, angle);
    }

    let factor = 1.0 + config.brightness_jitter * (2.0 * u_bright - 1.0);
    if factor != 1.0 {
        out = scale_brightness(&out, factor);
    }

    if config.horizontal_flip && u_flip < 0.5 {
        out = flip_horizontal(&out);
    }
    Ok(out)
}
