//! The five supported feature extractors and their weight sources.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{split_params, Graph};
use super::ops::Tensor;
use super::spec::GraphSpec;
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, ValueRange};

/// Environment variable naming a directory of exported pretrained weights.
pub const BACKBONE_DIR_ENV: &str = "MPOX_BACKBONE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BackboneId {
    VGG16,
    InceptionResNetV2,
    NASNetMobile,
    MobileNetV3Small,
    MobileNetV3Large,
}

impl BackboneId {
    pub const ALL: [BackboneId; 5] = [
        BackboneId::VGG16,
        BackboneId::InceptionResNetV2,
        BackboneId::NASNetMobile,
        BackboneId::MobileNetV3Small,
        BackboneId::MobileNetV3Large,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneId::VGG16 => "VGG16",
            BackboneId::InceptionResNetV2 => "InceptionResNetV2",
            BackboneId::NASNetMobile => "NASNetMobile",
            BackboneId::MobileNetV3Small => "MobileNetV3Small",
            BackboneId::MobileNetV3Large => "MobileNetV3Large",
        }
    }

    /// Square input resolution fed to every backbone.
    pub fn input_size(self) -> usize {
        224
    }

    /// Pixel convention the pretrained weights expect.
    ///
    /// The MobileNetV3 graphs contain their own rescaling layer and take raw
    /// `[0, 255]` pixels.
    pub fn value_range(self) -> ValueRange {
        match self {
            BackboneId::VGG16 => ValueRange::Caffe,
            BackboneId::InceptionResNetV2 | BackboneId::NASNetMobile => ValueRange::Symmetric,
            BackboneId::MobileNetV3Small | BackboneId::MobileNetV3Large => ValueRange::Raw,
        }
    }

    /// Channels of the final feature map, i.e. the embedding width.
    pub fn feature_dim(self) -> usize {
        match self {
            BackboneId::VGG16 => 512,
            BackboneId::InceptionResNetV2 => 1536,
            BackboneId::NASNetMobile => 1056,
            BackboneId::MobileNetV3Small => 576,
            BackboneId::MobileNetV3Large => 960,
        }
    }

    /// Bundled topology (no weights).
    pub fn topology(self) -> GraphSpec {
        let text = match self {
            BackboneId::VGG16 => include_str!("../../backbones/VGG16.json"),
            BackboneId::InceptionResNetV2 => include_str!("../../backbones/InceptionResNetV2.json"),
            BackboneId::NASNetMobile => include_str!("../../backbones/NASNetMobile.json"),
            BackboneId::MobileNetV3Small => include_str!("../../backbones/MobileNetV3Small.json"),
            BackboneId::MobileNetV3Large => include_str!("../../backbones/MobileNetV3Large.json"),
        };
        serde_json::from_str(text).expect("bundled topology parses")
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        BackboneId::ALL
            .into_iter()
            .find(|b| b.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::invalid(format!("unknown backbone {s:?}")))
    }
}

/// Where backbone parameters come from.
#[derive(Debug, Clone, PartialEq)]
pub enum BackboneSource {
    /// Directory holding `graph.json` and `weights.bin`, either directly or
    /// in a sub-directory named after the backbone.
    Pretrained(PathBuf),
    /// He-normal convolutions and identity batch normalization.
    Random { seed: u64 },
    /// Deterministic sine pattern shared with the exporter script.
    Pattern,
}

impl BackboneSource {
    /// Pretrained weights from [`BACKBONE_DIR_ENV`] when set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(BACKBONE_DIR_ENV).map(|d| BackboneSource::Pretrained(PathBuf::from(d)))
    }

    pub fn describe(&self) -> String {
        match self {
            BackboneSource::Pretrained(p) => format!("pretrained:{}", p.display()),
            BackboneSource::Random { seed } => format!("random:{seed}"),
            BackboneSource::Pattern => "pattern".into(),
        }
    }
}

/// A frozen feature extractor.
#[derive(Debug, Clone)]
pub struct Backbone {
    id: Option<BackboneId>,
    graph: Graph,
    value_range: ValueRange,
    source: String,
    digest: OnceLock<String>,
}

impl Backbone {
    pub fn load(id: BackboneId, source: &BackboneSource) -> Result<Self> {
        Self::load_at(id, source, id.input_size())
    }

    /// Load at a non-default square resolution.
    pub fn load_at(id: BackboneId, source: &BackboneSource, size: usize) -> Result<Self> {
        let (spec, params) = match source {
            BackboneSource::Pretrained(dir) => read_export(id, dir)?,
            BackboneSource::Random { seed } => {
                let spec = id.topology();
                let params = random_params(&spec, *seed);
                (spec, params)
            }
            BackboneSource::Pattern => {
                let spec = id.topology();
                let params = pattern_params(&spec);
                (spec, params)
            }
        };
        let graph = Graph::new(spec, params, Some((size, size)))?;
        Ok(Self {
            id: Some(id),
            graph,
            value_range: id.value_range(),
            source: source.describe(),
            digest: OnceLock::new(),
        })
    }

    /// Wrap an arbitrary graph, e.g. a hand-built test network.
    pub fn from_graph(graph: Graph, value_range: ValueRange) -> Self {
        Self {
            id: BackboneId::from_str(graph.name()).ok(),
            graph,
            value_range,
            source: "custom".into(),
            digest: OnceLock::new(),
        }
    }

    pub fn id(&self) -> Option<BackboneId> {
        self.id
    }

    pub fn name(&self) -> &str {
        self.graph.name()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value_range(&self) -> ValueRange {
        self.value_range
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// `(height, width)` of the expected input.
    pub fn input_hw(&self) -> (usize, usize) {
        let (h, w, _) = self.graph.input_shape();
        (h, w)
    }

    pub fn feature_dim(&self) -> usize {
        self.graph.output_shape().2
    }

    pub fn parameter_count(&self) -> usize {
        self.graph.parameter_count()
    }

    /// SHA-256 of the parameter bytes.
    pub fn digest(&self) -> String {
        self.digest.get_or_init(|| self.graph.digest()).clone()
    }

    /// Convert an image to the network's input tensor.
    pub fn prepare(&self, image: &ImageTensor) -> Result<Tensor> {
        let (h, w) = self.input_hw();
        if (image.height, image.width) != (h, w) {
            return Err(Error::Shape {
                expected: format!("{h}x{w}x3"),
                actual: format!("{}x{}x3", image.height, image.width),
            });
        }
        let data = if image.range == self.value_range {
            image.data.clone()
        } else {
            image.normalized(self.value_range).data
        };
        Tensor::new(h, w, 3, data)
    }

    /// Final feature map.
    pub fn feature_map(&self, image: &ImageTensor) -> Result<Tensor> {
        self.graph.forward(&self.prepare(image)?)
    }

    /// Globally average-pooled embedding.
    pub fn embed(&self, image: &ImageTensor) -> Result<Vec<f32>> {
        let map = self.feature_map(image)?;
        Ok(super::ops::global_avg_pool(&map).data)
    }
}

fn read_export(id: BackboneId, dir: &Path) -> Result<(GraphSpec, Vec<Vec<f32>>)> {
    let nested = dir.join(id.name());
    let dir = if nested.join("graph.json").is_file() { nested } else { dir.to_path_buf() };
    let graph_path = dir.join("graph.json");
    let weights_path = dir.join("weights.bin");
    if !graph_path.is_file() || !weights_path.is_file() {
        return Err(Error::BackboneUnavailable(format!(
            "{id}: expected graph.json and weights.bin in {}",
            dir.display()
        )));
    }
    let text = std::fs::read_to_string(&graph_path).map_err(|e| Error::io(&graph_path, e))?;
    let spec: GraphSpec = serde_json::from_str(&text)?;
    if spec.name != id.name() {
        return Err(Error::BackboneUnavailable(format!(
            "{} holds {}, not {id}",
            graph_path.display(),
            spec.name
        )));
    }
    let bytes = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let params = split_params(&spec, &bytes)?;
    Ok((spec, params))
}

/// He-normal kernels, zero biases, identity batch normalization.
pub fn random_params(spec: &GraphSpec, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for node in &spec.nodes {
        for (pname, shape) in &node.params {
            let n: usize = shape.iter().product();
            let values = match pname.as_str() {
                "kernel" | "depthwise_kernel" => {
                    let fan_in = fan_in(pname, shape);
                    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                "gamma" | "moving_variance" => vec![1.0; n],
                _ => vec![0.0; n],
            };
            out.push(values);
        }
    }
    out
}

fn fan_in(pname: &str, shape: &[usize]) -> usize {
    if pname == "depthwise_kernel" {
        shape[0] * shape[1]
    } else {
        shape[..shape.len() - 1].iter().product()
    }
}

/// Deterministic weights matching `python/export_backbone.py --weights pattern`.
pub fn pattern_params(spec: &GraphSpec) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    let mut t = 0usize;
    for node in &spec.nodes {
        for (pname, shape) in &node.params {
            let n: usize = shape.iter().product();
            let scale = match pname.as_str() {
                "kernel" | "depthwise_kernel" => 2.0 / (fan_in(pname, shape) as f64).sqrt(),
                _ => 0.0,
            };
            let values = (0..n)
                .map(|j| {
                    let s = (0.7 * j as f64 + 0.3 * t as f64 + 0.1).sin();
                    let v = match pname.as_str() {
                        "kernel" | "depthwise_kernel" => s * scale,
                        "gamma" => 1.0 + 0.1 * s,
                        "moving_variance" => 1.0 + 0.1 * (s + 1.0),
                        _ => 0.05 * s,
                    };
                    v as f32
                })
                .collect();
            out.push(values);
            t += 1;
        }
    }
    out
}

/// Input image matching the exporter's reference input.
pub fn pattern_input(h: usize, w: usize, c: usize) -> Tensor {
    let data = (0..h * w * c)
        .map(|i| {
            let i = i as f64;
            ((0.013 * i).sin() * (0.0071 * i + 0.5).cos()) as f32
        })
        .collect();
    Tensor { h, w, c, data }
}
