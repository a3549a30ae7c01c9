use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, ValueRange};

/// Axis-aligned rectangle in source-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl CropRect {
    pub fn full(width: u32, height: u32) -> Self {
        Self {
            x: 0,
            y: 0,
            width,
            height,
        }
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<()> {
        let fits = self.width > 0
            && self.height > 0
            && u64::from(self.x) + u64::from(self.width) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.height) <= u64::from(height);
        if fits {
            Ok(())
        } else {
            Err(Error::CropOutOfBounds {
                rect: format!("(x={}, y={}, w={}, h={})", self.x, self.y, self.width, self.height),
                width,
                height,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_height: u32,
    pub target_width: u32,
    pub value_range: ValueRange,
    pub crop: Option<CropRect>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_height: 224,
            target_width: 224,
            value_range: ValueRange::Raw,
            crop: None,
        }
    }
}

impl PreprocessConfig {
    pub fn with_size(size: u32) -> Self {
        Self {
            target_height: size,
            target_width: size,
            ..Self::default()
        }
    }
}

pub fn decode_rgb(bytes: &[u8]) -> Result<image::RgbImage> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Decode(e.to_string()))
}

/// Decode, crop, resize (bilinear) and normalize an encoded image.
pub fn preprocess_image(bytes: &[u8], config: &PreprocessConfig) -> Result<ImageTensor> {
    let img = decode_rgb(bytes)?;
    preprocess_rgb(&img, config)
}

pub fn preprocess_rgb(img: &image::RgbImage, config: &PreprocessConfig) -> Result<ImageTensor> {
    if config.target_height == 0 || config.target_width == 0 {
        return Err(Error::invalid("target dimensions must be positive"));
    }
    let (w, h) = img.dimensions();
    let cropped;
    let view = match config.crop {
        Some(rect) => {
            rect.check_within(w, h)?;
            cropped = imageops::crop_imm(img, rect.x, rect.y, rect.width, rect.height).to_image();
            &cropped
        }
        None => img,
    };
    let resized;
    let view = if view.dimensions() == (config.target_width, config.target_height) {
        view
    } else {
        resized = imageops::resize(view, config.target_width, config.target_height, FilterType::Triangle);
        &resized
    };
    Ok(ImageTensor::from_rgb8(view).normalized(config.value_range))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(img: &image::RgbImage) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    fn pattern(w: u32, h: u32) -> image::RgbImage {
        image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn resize_shape_contract() {
        let t = preprocess_image(&encode(&pattern(448, 448)), &PreprocessConfig::default()).unwrap();
        assert_eq!(t.shape(), (224, 224, 3));
    }

    #[test]
    fn conforming_input_is_preserved() {
        let img = pattern(224, 224);
        let t = preprocess_image(&encode(&img), &PreprocessConfig::default()).unwrap();
        let expect: Vec<f32> = img.as_raw().iter().map(|&v| v as f32).collect();
        assert_eq!(t.data, expect);
    }

    #[test]
    fn crop_matches_hand_extracted_subimage() {
        let img = pattern(100, 100);
        // extract by explicit indexing rather than through imageops
        let sub = image::RgbImage::from_fn(50, 50, |x, y| *img.get_pixel(x + 10, y + 10));
        let crop = CropRect { x: 10, y: 10, width: 50, height: 50 };
        let cfg = PreprocessConfig { crop: Some(crop), ..PreprocessConfig::with_size(50) };
        let a = preprocess_image(&encode(&img), &cfg).unwrap();
        let b = preprocess_image(&encode(&sub), &PreprocessConfig::with_size(50)).unwrap();
        assert_eq!(a.data, b.data);

        let cfg = PreprocessConfig { crop: Some(crop), ..PreprocessConfig::with_size(32) };
        let a = preprocess_image(&encode(&img), &cfg).unwrap();
        let b = preprocess_image(&encode(&sub), &PreprocessConfig::with_size(32)).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn out_of_bounds_crop_rejected() {
        let cfg = PreprocessConfig {
            crop: Some(CropRect { x: 60, y: 0, width: 50, height: 10 }),
            ..PreprocessConfig::default()
        };
        assert!(matches!(
            preprocess_image(&encode(&pattern(100, 100)), &cfg),
            Err(Error::CropOutOfBounds { .. })
        ));
    }

    #[test]
    fn undecodable_bytes_rejected() {
        assert!(matches!(
            preprocess_image(b"not an image", &PreprocessConfig::default()),
            Err(Error::Decode(_))
        ));
    }

    #[test]
    fn deterministic() {
        let bytes = encode(&pattern(300, 200));
        let cfg = PreprocessConfig { value_range: ValueRange::Symmetric, ..Default::default() };
        assert_eq!(preprocess_image(&bytes, &cfg).unwrap(), preprocess_image(&bytes, &cfg).unwrap());
    }
}
