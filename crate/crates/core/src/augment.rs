//! Training-time image augmentation.
//!
//! Six transforms are applied in a fixed order (flip, rotation, translation,
//! zoom, contrast, brightness). Each continuous factor `f` draws its
//! parameter uniformly from `[-f, f]`; a factor of zero skips the transform
//! entirely, without consuming randomness. Geometric transforms sample
//! bilinearly and fill out-of-frame pixels by reflection about the edge
//! (`d c b a | a b c d | d c b a`).

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const MAX_FACTOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum FlipType {
    Vertical = 0,
    Horizontal = 1,
    Both = 2,
}

impl From<FlipType> for u8 {
    fn from(f: FlipType) -> u8 {
        f as u8
    }
}

impl TryFrom<u8> for FlipType {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(FlipType::Vertical),
            1 => Ok(FlipType::Horizontal),
            2 => Ok(FlipType::Both),
            _ => Err(format!("flip_type must be 0, 1 or 2, got {v}")),
        }
    }
}

/// What a flip draw decided to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlipOutcome {
    None,
    Vertical,
    Horizontal,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation: f64,
    pub zoom: f64,
    pub contrast: f64,
    pub brightness: f64,
    pub tr_width: f64,
    pub tr_height: f64,
    pub flip_type: FlipType,
}

impl AugmentConfig {
    /// All factors zero; only the flip remains random.
    pub fn identity(flip_type: FlipType) -> Self {
        Self {
            rotation: 0.0,
            zoom: 0.0,
            contrast: 0.0,
            brightness: 0.0,
            tr_width: 0.0,
            tr_height: 0.0,
            flip_type,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.factors() {
            if !(0.0..=MAX_FACTOR).contains(&v) {
                return Err(Error::invalid(format!("augmentation factor {name} = {v} outside [0, {MAX_FACTOR}]")));
            }
        }
        Ok(())
    }

    pub fn factors(&self) -> [(&'static str, f64); 6] {
        [
            ("rotation", self.rotation),
            ("zoom", self.zoom),
            ("contrast", self.contrast),
            ("brightness", self.brightness),
            ("tr_width", self.tr_width),
            ("tr_height", self.tr_height),
        ]
    }
}

fn symmetric(rng: &mut impl Rng, factor: f64) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * factor
}

pub fn draw_flip(mode: FlipType, rng: &mut impl Rng) -> FlipOutcome {
    match mode {
        FlipType::Vertical => {
            if rng.random::<bool>() {
                FlipOutcome::Vertical
            } else {
                FlipOutcome::None
            }
        }
        FlipType::Horizontal => {
            if rng.random::<bool>() {
                FlipOutcome::Horizontal
            } else {
                FlipOutcome::None
            }
        }
        FlipType::Both => match rng.random_range(0..4u8) {
            0 => FlipOutcome::None,
            1 => FlipOutcome::Vertical,
            2 => FlipOutcome::Horizontal,
            _ => FlipOutcome::Both,
        },
    }
}

/// Random flip: `Vertical`/`Horizontal` flip with probability one half,
/// `Both` picks one of the four outcomes uniformly.
pub fn flip(image: &ImageTensor, mode: FlipType, rng: &mut impl Rng) -> ImageTensor {
    apply_flip(image, draw_flip(mode, rng))
}

pub fn apply_flip(image: &ImageTensor, outcome: FlipOutcome) -> ImageTensor {
    let (flip_v, flip_h) = match outcome {
        FlipOutcome::None => return image.clone(),
        FlipOutcome::Vertical => (true, false),
        FlipOutcome::Horizontal => (false, true),
        FlipOutcome::Both => (true, true),
    };
    let (h, w) = (image.height, image.width);
    let mut out = ImageTensor::zeros(h, w, image.range);
    for y in 0..h {
        let sy = if flip_v { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if flip_h { w - 1 - x } else { x };
            for c in 0..3 {
                out.data[(y * w + x) * 3 + c] = image.data[(sy * w + sx) * 3 + c];
            }
        }
    }
    out
}

#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Resample with `src(y, x)` giving the source coordinate of each output
/// pixel.
fn resample(image: &ImageTensor, src: impl Fn(f64, f64) -> (f64, f64)) -> ImageTensor {
    let (h, w) = (image.height, image.width);
    let mut out = ImageTensor::zeros(h, w, image.range);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y as f64, x as f64);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let (y0, x0) = (y0 as i64, x0 as i64);
            let ya = reflect(y0, h);
            let yb = reflect(y0 + 1, h);
            let xa = reflect(x0, w);
            let xb = reflect(x0 + 1, w);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| image.data[(yy * w + xx) * 3 + c];
                let top = if fx == 0.0 { p(ya, xa) } else { (1.0 - fx) * p(ya, xa) + fx * p(ya, xb) };
                let v = if fy == 0.0 {
                    top
                } else {
                    let bottom = if fx == 0.0 { p(yb, xa) } else { (1.0 - fx) * p(yb, xa) + fx * p(yb, xb) };
                    (1.0 - fy) * top + fy * bottom
                };
                out.data[(y * w + x) * 3 + c] = v;
            }
        }
    }
    out
}

fn center(image: &ImageTensor) -> (f64, f64) {
    ((image.height as f64 - 1.0) / 2.0, (image.width as f64 - 1.0) / 2.0)
}

/// Rotate about the image center by `angle` radians.
pub fn rotate(image: &ImageTensor, angle: f64) -> ImageTensor {
    if angle == 0.0 {
        return image.clone();
    }
    let (cy, cx) = center(image);
    let (s, c) = angle.sin_cos();
    resample(image, |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        (cy - s * dx + c * dy, cx + c * dx + s * dy)
    })
}

/// Shift content by `dx * width` pixels right and `dy * height` pixels down.
pub fn translate(image: &ImageTensor, dx: f64, dy: f64) -> ImageTensor {
    if dx == 0.0 && dy == 0.0 {
        return image.clone();
    }
    let sx = dx * image.width as f64;
    let sy = dy * image.height as f64;
    resample(image, |y, x| (y - sy, x - sx))
}

/// Rescale about the center: the output frame shows a window of
/// `(1 + factor)` times the frame size, so negative factors zoom in.
pub fn zoom(image: &ImageTensor, factor: f64) -> ImageTensor {
    if factor == 0.0 {
        return image.clone();
    }
    let (cy, cx) = center(image);
    let s = 1.0 + factor;
    resample(image, |y, x| (cy + (y - cy) * s, cx + (x - cx) * s))
}

/// Scale deviations from each channel's mean by `1 + factor`.
pub fn adjust_contrast(image: &ImageTensor, factor: f64) -> ImageTensor {
    if factor == 0.0 {
        return image.clone();
    }
    let n = (image.height * image.width) as f64;
    let mut mean = [0.0f64; 3];
    for px in image.data.chunks_exact(3) {
        for c in 0..3 {
            mean[c] += f64::from(px[c]);
        }
    }
    let mean = mean.map(|m| (m / n) as f32);
    let k = (1.0 + factor) as f32;
    let mut out = image.clone();
    for px in out.data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] - mean[c]) * k + mean[c];
        }
    }
    out.clip();
    out
}

/// Add `factor` times the width of the value range.
pub fn adjust_brightness(image: &ImageTensor, factor: f64) -> ImageTensor {
    if factor == 0.0 {
        return image.clone();
    }
    let delta = (factor * f64::from(image.range.span())) as f32;
    let mut out = image.clone();
    out.data.iter_mut().for_each(|v| *v += delta);
    out.clip();
    out
}

/// Parameters actually drawn for one augmentation call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrawnParams {
    pub flip: FlipOutcome,
    pub angle: f64,
    pub dx: f64,
    pub dy: f64,
    pub zoom: f64,
    pub contrast: f64,
    pub brightness: f64,
}

pub fn draw_params(config: &AugmentConfig, rng: &mut impl Rng) -> DrawnParams {
    let flip = draw_flip(config.flip_type, rng);
    let mut draw = |f: f64| if f > 0.0 { symmetric(rng, f) } else { 0.0 };
    DrawnParams {
        flip,
        angle: draw(config.rotation) * TAU,
        dx: draw(config.tr_width),
        dy: draw(config.tr_height),
        zoom: draw(config.zoom),
        contrast: draw(config.contrast),
        brightness: draw(config.brightness),
    }
}

pub fn apply_params(image: &ImageTensor, p: &DrawnParams) -> ImageTensor {
    let out = apply_flip(image, p.flip);
    let out = rotate(&out, p.angle);
    let out = translate(&out, p.dx, p.dy);
    let out = zoom(&out, p.zoom);
    let out = adjust_contrast(&out, p.contrast);
    adjust_brightness(&out, p.brightness)
}

pub fn augment(image: &ImageTensor, config: &AugmentConfig, rng: &mut impl Rng) -> ImageTensor {
    apply_params(image, &draw_params(config, rng))
}
