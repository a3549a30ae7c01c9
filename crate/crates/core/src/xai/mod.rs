//! Grad-CAM heatmaps and overlays.
//!
//! Gradients are taken of the pre-softmax class score. The target layer
//! defaults to the backbone's last convolution (after its activation).

use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ops::global_avg_pool;
use crate::nn::Tensor;
use crate::tensor::{ImageTensor, ValueRange};

static INFERNO: &[u8; 768] = include_bytes!("inferno.bin");

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    #[default]
    Inferno,
    Jet,
}

impl Colormap {
    /// RGB in `[0, 255]` for `v` in `[0, 1]`; 0 is the cold end.
    pub fn rgb(self, v: f32) -> [f32; 3] {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        match self {
            Colormap::Inferno => {
                let pos = v * 255.0;
                let i = (pos.floor() as usize).min(254);
                let t = pos - i as f32;
                let at = |j: usize, c: usize| f32::from(INFERNO[3 * j + c]);
                [0, 1, 2].map(|c| at(i, c) * (1.0 - t) + at(i + 1, c) * t)
            }
            Colormap::Jet => {
                let ramp = |x: f32| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0) * 255.0;
                [ramp(3.0), ramp(2.0), ramp(1.0)]
            }
        }
    }
}

impl FromStr for Colormap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inferno" => Ok(Colormap::Inferno),
            "jet" => Ok(Colormap::Jet),
            other => Err(Error::invalid(format!("unknown colormap {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCamResult {
    pub target_class: usize,
    pub layer: String,
    /// `height x width`, row-major, values in `[0, 1]`.
    pub heatmap: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// Rectified class-activation map at the layer's resolution.
    pub raw_map: Vec<f32>,
    pub map_height: usize,
    pub map_width: usize,
    /// Spatially averaged gradient per channel.
    pub channel_weights: Vec<f32>,
}

impl GradCamResult {
    pub fn heatmap_at(&self, y: usize, x: usize) -> f32 {
        self.heatmap[y * self.width + x]
    }

    /// Row and column of the largest heatmap value (first on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.heatmap.iter().enumerate() {
            if *v > self.heatmap[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Grayscale image with values scaled to 0..=255.
    pub fn to_gray(&self) -> GrayImage {
        let buf = self.heatmap.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, buf).expect("heatmap dimensions")
    }
}

/// Grad-CAM for `target_class` at the default layer.
pub fn grad_cam(model: &Model, image: &ImageTensor, target_class: usize) -> Result<GradCamResult> {
    grad_cam_at(model, image, target_class, None)
}

/// Grad-CAM at a named backbone node.
pub fn grad_cam_at(
    model: &Model,
    image: &ImageTensor,
    target_class: usize,
    layer: Option<&str>,
) -> Result<GradCamResult> {
    if target_class >= model.n_classes() {
        return Err(Error::invalid(format!(
            "class {target_class} out of range for {} classes",
            model.n_classes()
        )));
    }
    let graph = model.backbone.graph();
    let layer = match layer {
        Some(l) => l.to_string(),
        None => graph
            .last_conv_name()
            .ok_or_else(|| Error::Graph(format!("{} has no convolutional layer", graph.name())))?
            .to_string(),
    };
    let target = graph
        .node_index(&layer)
        .ok_or_else(|| Error::Graph(format!("no node named {layer:?}")))?;
    let out = graph.output_index();
    if target > out {
        return Err(Error::Graph(format!("{layer:?} is not upstream of the output")));
    }

    let input = model.backbone.prepare(image)?;
    let trace = graph.forward_trace(&input)?;
    let map = &trace[out];
    let features = global_avg_pool(map).data;
    let dfeat = model.head.logit_gradient(&features, target_class);

    let hw = map.spatial() as f32;
    let mut dmap = Tensor::zeros(map.h, map.w, map.c);
    for px in dmap.data.chunks_mut(map.c) {
        for (g, d) in px.iter_mut().zip(&dfeat) {
            *g = d / hw;
        }
    }
    let grad = if target == out { dmap } else { graph.backward(&trace, out, dmap, target)? };

    let acts = &trace[target];
    let mut alpha = vec![0f64; acts.c];
    for px in grad.data.chunks(acts.c) {
        for (a, g) in alpha.iter_mut().zip(px) {
            *a += f64::from(*g);
        }
    }
    let n = acts.spatial() as f64;
    let alpha: Vec<f32> = alpha.iter().map(|a| (a / n) as f32).collect();

    let raw: Vec<f32> = acts
        .data
        .chunks(acts.c)
        .map(|px| {
            let s: f64 = px.iter().zip(&alpha).map(|(a, w)| f64::from(*a) * f64::from(*w)).sum();
            (s as f32).max(0.0)
        })
        .collect();

    // Resize first, then normalise, so the heatmap spans exactly [0, 1].
    let (height, width) = (image.height, image.width);
    let constant = raw.iter().all(|v| *v == raw[0]);
    let heatmap = if constant {
        vec![0.0; height * width]
    } else {
        let up = resize_bilinear(&raw, acts.h, acts.w, height, width);
        let (lo, hi) = up.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        if hi > lo {
            up.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; up.len()]
        }
    };

    Ok(GradCamResult {
        target_class,
        layer,
        heatmap,
        height,
        width,
        raw_map: raw,
        map_height: acts.h,
        map_width: acts.w,
        channel_weights: alpha,
    })
}

/// Bilinear resize of a single-channel map with half-pixel centres.
pub fn resize_bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let coord = |d: usize, sn: usize, dn: usize| -> (usize, usize, f32) {
        let s = ((d as f32 + 0.5) * sn as f32 / dn as f32 - 0.5).clamp(0.0, (sn - 1) as f32);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(sn - 1);
        (i0, i1, s - i0 as f32)
    };
    let cols: Vec<_> = (0..dw).map(|x| coord(x, sw, dw)).collect();
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, ty) = coord(y, sh, dh);
        for &(x0, x1, tx) in &cols {
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bottom = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayImage {
    pub image: RgbImage,
    pub alpha: f32,
    pub colormap: Colormap,
}

impl OverlayImage {
    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(&image::DynamicImage::ImageRgb8(self.image.clone()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_png()?).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn encode_png(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Decode(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

/// Blend `alpha * colormap(heatmap) + (1 - alpha) * original`.
///
/// The heatmap is resized to the original's dimensions when they differ.
pub fn overlay(original: &ImageTensor, result: &GradCamResult, alpha: f32, colormap: Colormap) -> Result<OverlayImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let (h, w) = (original.height, original.width);
    let heat = if (result.height, result.width) == (h, w) {
        result.heatmap.clone()
    } else {
        resize_bilinear(&result.heatmap, result.height, result.width, h, w)
    };
    let raw = original.normalized(ValueRange::Raw);
    let buf: Vec<u8> = raw
        .data
        .chunks(3)
        .zip(&heat)
        .flat_map(|(px, v)| {
            let c = colormap.rgb(*v);
            [0, 1, 2].map(|k| (alpha * c[k] + (1.0 - alpha) * px[k]).round().clamp(0.0, 255.0) as u8)
        })
        .collect();
    Ok(OverlayImage {
        image: RgbImage::from_raw(w as u32, h as u32, buf).expect("overlay dimensions"),
        alpha,
        colormap,
    })
}

/// Write `<stem>_heatmap.png` (grayscale) and `<stem>_overlay.png` into `dir`.
pub fn export(dir: impl AsRef<Path>, stem: &str, result: &GradCamResult, overlay: &OverlayImage) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let heat = dir.join(format!("{stem}_heatmap.png"));
    let png = encode_png(&image::DynamicImage::ImageLuma8(result.to_gray()))?;
    std::fs::write(&heat, png).map_err(|e| Error::io(&heat, e))?;
    overlay.save(dir.join(format!("{stem}_overlay.png")))
}
