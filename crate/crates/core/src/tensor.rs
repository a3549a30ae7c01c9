//! Image tensors and pixel value conventions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CAFFE_MEAN_BGR: [f32; 3] = [103.939, 116.779, 123.68];

/// Pixel normalization scheme. `Raw` keeps 8-bit intensities as floats in
/// `[0, 255]`; the other schemes follow the pretraining conventions of the
/// supported backbones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    #[default]
    Raw,
    /// `x / 255`
    Unit,
    /// `x / 127.5 - 1`
    Symmetric,
    /// BGR channel order with the ImageNet mean subtracted.
    Caffe,
}

impl ValueRange {
    /// Inclusive bounds of channel `c` under this scheme.
    pub fn bounds(self, c: usize) -> (f32, f32) {
        match self {
            ValueRange::Raw => (0.0, 255.0),
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
            ValueRange::Caffe => (-CAFFE_MEAN_BGR[c], 255.0 - CAFFE_MEAN_BGR[c]),
        }
    }

    /// Width of the valid interval (identical for every channel).
    pub fn span(self) -> f32 {
        let (lo, hi) = self.bounds(0);
        hi - lo
    }

    fn from_raw_pixel(self, rgb: [f32; 3]) -> [f32; 3] {
        match self {
            ValueRange::Raw => rgb,
            ValueRange::Unit => rgb.map(|v| v / 255.0),
            ValueRange::Symmetric => rgb.map(|v| v / 127.5 - 1.0),
            ValueRange::Caffe => [
                rgb[2] - CAFFE_MEAN_BGR[0],
                rgb[1] - CAFFE_MEAN_BGR[1],
                rgb[0] - CAFFE_MEAN_BGR[2],
            ],
        }
    }

    fn to_raw_pixel(self, px: [f32; 3]) -> [f32; 3] {
        match self {
            ValueRange::Raw => px,
            ValueRange::Unit => px.map(|v| v * 255.0),
            ValueRange::Symmetric => px.map(|v| (v + 1.0) * 127.5),
            ValueRange::Caffe => [
                px[2] + CAFFE_MEAN_BGR[2],
                px[1] + CAFFE_MEAN_BGR[1],
                px[0] + CAFFE_MEAN_BGR[0],
            ],
        }
    }
}

/// Height x width x 3 image in row-major HWC layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub range: ValueRange,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>, range: ValueRange) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape {
                expected: format!("{height}x{width}x3 = {}", height * width * 3),
                actual: data.len().to_string(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
            range,
        })
    }

    pub fn zeros(height: usize, width: usize, range: ValueRange) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
            range,
        }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            data: img.as_raw().iter().map(|&v| f32::from(v)).collect(),
            range: ValueRange::Raw,
        }
    }

    /// Back to 8-bit RGB, rounding and clamping.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.normalized(ValueRange::Raw);
        let buf = raw
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer length matches dimensions")
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, 3)
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * 3 + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    /// Re-express the pixels under another normalization scheme.
    pub fn normalized(&self, to: ValueRange) -> ImageTensor {
        if to == self.range {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len());
        for px in self.data.chunks_exact(3) {
            let raw = self.range.to_raw_pixel([px[0], px[1], px[2]]);
            data.extend_from_slice(&to.from_raw_pixel(raw));
        }
        ImageTensor {
            height: self.height,
            width: self.width,
            data,
            range: to,
        }
    }

    /// Clamp every channel to the valid interval of the tensor's range.
    pub fn clip(&mut self) {
        let bounds: [(f32, f32); 3] = [0, 1, 2].map(|c| self.range.bounds(c));
        for (i, v) in self.data.iter_mut().enumerate() {
            let (lo, hi) = bounds[i % 3];
            *v = v.clamp(lo, hi);
        }
    }
}
