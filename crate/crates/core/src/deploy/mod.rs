//! Serialized model artifacts, half-precision quantization and the latency
//! benchmark.
//!
//! An artifact directory holds `model.blob` and `meta`. The blob is
//!
//! ```text
//! "MPXB" | u16 version | u8 precision | u8 reserved | u32 header length
//! JSON header | tensors (f32 or f16, little endian)
//! ```
//!
//! Quantization is weight-only: fp16 tensors are widened to f32 on load.

mod bench;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use half::f16;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{compute_metrics, confusion, ConfusionMatrix, MetricSet};
use crate::labels::TaskKind;
use crate::model::{Dense, EpochStats, Head, HeadConfig, Model, Provenance, Sample, TrainedModel};
use crate::nn::{Backbone, Graph, GraphSpec};
use crate::tensor::ValueRange;

pub use bench::{benchmark_inference, BenchmarkOptions, BenchmarkReport, HostDescriptor, DEFAULT_LOCK_NAME};

pub const BLOB_FILE: &str = "model.blob";
pub const META_FILE: &str = "meta";
const MAGIC: &[u8; 4] = b"MPXB";
const VERSION: u16 = 1;
const PREFIX_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp16,
}

impl Precision {
    pub fn bytes_per_value(self) -> usize {
        match self {
            Precision::Fp32 => 4,
            Precision::Fp16 => 2,
        }
    }

    fn code(self) -> u8 {
        match self {
            Precision::Fp32 => 0,
            Precision::Fp16 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Precision::Fp32),
            1 => Ok(Precision::Fp16),
            other => Err(Error::Artifact(format!("unknown precision code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobHeader {
    backbone: String,
    graph: GraphSpec,
    input_hw: (usize, usize),
    value_range: ValueRange,
    task: TaskKind,
    head_config: HeadConfig,
    layer_shapes: Vec<(usize, usize)>,
    /// Element count of every stored tensor, backbone first, then each
    /// head layer's weight and bias.
    tensor_lengths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactProvenance {
    pub backbone: String,
    pub backbone_digest: String,
    pub backbone_source: String,
    pub task: TaskKind,
    pub fold: Option<usize>,
    pub seed: u64,
    /// SHA-256 of the fp32 blob this artifact was quantized from.
    pub quantized_from: Option<String>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub precision: Precision,
    pub blob_bytes: u64,
    pub blob_sha256: String,
    pub header_bytes: u64,
    pub payload_bytes: u64,
    pub parameter_count: u64,
    /// fp32 blob size over this blob's size, for quantized artifacts.
    pub size_ratio: Option<f64>,
    pub provenance: ArtifactProvenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub meta: ArtifactMeta,
    pub blob: Vec<u8>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode(model: &TrainedModel, precision: Precision) -> Result<(Vec<u8>, usize, usize)> {
    let m = &model.model;
    let graph = m.backbone.graph();
    let (h, w, _) = graph.input_shape();
    let mut tensors: Vec<&[f32]> = graph.params().iter().map(Vec::as_slice).collect();
    for l in &m.head.layers {
        tensors.push(&l.weight);
        tensors.push(&l.bias);
    }
    let header = BlobHeader {
        backbone: m.backbone.name().to_string(),
        graph: graph.spec().clone(),
        input_hw: (h, w),
        value_range: m.backbone.value_range(),
        task: m.task,
        head_config: m.head.config.clone(),
        layer_shapes: m.head.layers.iter().map(|l| (l.inputs, l.outputs)).collect(),
        tensor_lengths: tensors.iter().map(|t| t.len()).collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let n_values: usize = tensors.iter().map(|t| t.len()).sum();
    let header_len = u32::try_from(header.len()).map_err(|_| Error::Artifact("header too large".into()))?;
    let mut blob = Vec::with_capacity(PREFIX_LEN + header.len() + n_values * precision.bytes_per_value());
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&VERSION.to_le_bytes());
    blob.push(precision.code());
    blob.push(0);
    blob.extend_from_slice(&header_len.to_le_bytes());
    blob.extend_from_slice(&header);
    for t in tensors {
        match precision {
            Precision::Fp32 => t.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes())),
            Precision::Fp16 => t.iter().for_each(|v| blob.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
        }
    }
    Ok((blob, header.len(), n_values))
}

fn build(model: &TrainedModel, precision: Precision, quantized_from: Option<(String, u64)>) -> Result<ModelArtifact> {
    let (blob, header_len, n_values) = encode(model, precision)?;
    let m = &model.model;
    let size_ratio = quantized_from.as_ref().map(|(_, bytes)| *bytes as f64 / blob.len() as f64);
    Ok(ModelArtifact {
        meta: ArtifactMeta {
            precision,
            blob_bytes: blob.len() as u64,
            blob_sha256: sha256_hex(&blob),
            header_bytes: (PREFIX_LEN + header_len) as u64,
            payload_bytes: (n_values * precision.bytes_per_value()) as u64,
            parameter_count: n_values as u64,
            size_ratio,
            provenance: ArtifactProvenance {
                backbone: m.backbone.name().to_string(),
                backbone_digest: m.backbone.digest(),
                backbone_source: m.backbone.source().to_string(),
                task: m.task,
                fold: model.provenance.fold,
                seed: model.provenance.seed,
                quantized_from: quantized_from.map(|(d, _)| d),
                history: model.history.clone(),
                best_epoch: model.best_epoch,
            },
        },
        blob,
    })
}

/// Full-precision artifact of a trained model.
pub fn export_fp32(model: &TrainedModel) -> Result<ModelArtifact> {
    build(model, Precision::Fp32, None)
}

/// Half-precision artifact; records the digest and size of the fp32 blob.
pub fn quantize_fp16(model: &TrainedModel) -> Result<ModelArtifact> {
    let full = export_fp32(model)?;
    build(
        model,
        Precision::Fp16,
        Some((full.meta.blob_sha256.clone(), full.meta.blob_bytes)),
    )
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

impl ModelArtifact {
    pub fn byte_size(&self) -> u64 {
        self.blob.len() as u64
    }

    pub fn precision(&self) -> Precision {
        self.meta.precision
    }

    /// Write `model.blob` and `meta` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob = dir.join(BLOB_FILE);
        fs::write(&blob, &self.blob).map_err(|e| Error::io(&blob, e))?;
        let meta = dir.join(META_FILE);
        fs::write(&meta, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::io(&meta, e))
    }

    /// Read an artifact directory, checking size and digest against `meta`.
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ArtifactMeta = serde_json::from_str(&text)?;
        let blob_path = dir.join(BLOB_FILE);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if blob.len() as u64 != meta.blob_bytes {
            return Err(Error::Artifact(format!(
                "{} holds {} bytes, meta says {}",
                blob_path.display(),
                blob.len(),
                meta.blob_bytes
            )));
        }
        if sha256_hex(&blob) != meta.blob_sha256 {
            return Err(Error::Artifact(format!("{} does not match its digest", blob_path.display())));
        }
        Ok(Self { meta, blob })
    }

    /// Decode the blob into a runnable model. fp16 weights are widened.
    pub fn load_model(&self) -> Result<TrainedModel> {
        let b = &self.blob;
        if b.len() < PREFIX_LEN || &b[..4] != MAGIC {
            return Err(Error::Artifact("not a model blob".into()));
        }
        let version = read_u16(b, 4);
        if version != VERSION {
            return Err(Error::Artifact(format!("unsupported blob version {version}")));
        }
        let precision = Precision::from_code(b[6])?;
        let header_len = u32::from_le_bytes([b[8], b[9], b[10], b[11]]) as usize;
        let body = PREFIX_LEN + header_len;
        if b.len() < body {
            return Err(Error::Artifact("truncated header".into()));
        }
        let header: BlobHeader = serde_json::from_slice(&b[PREFIX_LEN..body])
            .map_err(|e| Error::Artifact(format!("bad header: {e}")))?;
        let total: usize = header.tensor_lengths.iter().sum();
        let width = precision.bytes_per_value();
        if b.len() - body != total * width {
            return Err(Error::Artifact(format!(
                "payload holds {} bytes, header describes {}",
                b.len() - body,
                total * width
            )));
        }
        let payload = &b[body..];
        let values: Vec<f32> = match precision {
            Precision::Fp32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Precision::Fp16 => payload
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        };
        let mut tensors = Vec::with_capacity(header.tensor_lengths.len());
        let mut at = 0;
        for len in &header.tensor_lengths {
            tensors.push(values[at..at + len].to_vec());
            at += len;
        }
        let n_head = 2 * header.layer_shapes.len();
        if tensors.len() < n_head {
            return Err(Error::Artifact("fewer tensors than head layers".into()));
        }
        let head_tensors = tensors.split_off(tensors.len() - n_head);
        let graph = Graph::new(header.graph, tensors, Some(header.input_hw))?;
        let backbone = Backbone::from_graph(graph, header.value_range);
        let mut it = head_tensors.into_iter();
        let layers = header
            .layer_shapes
            .iter()
            .map(|&(inputs, outputs)| Dense {
                inputs,
                outputs,
                weight: it.next().unwrap_or_default(),
                bias: it.next().unwrap_or_default(),
            })
            .collect();
        let head = Head::from_layers(header.head_config, layers)?;
        let p = &self.meta.provenance;
        Ok(TrainedModel {
            model: Model {
                backbone: Arc::new(backbone),
                head,
                task: header.task,
            },
            history: p.history.clone(),
            best_epoch: p.best_epoch,
            provenance: Provenance {
                fold: p.fold,
                seed: p.seed,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEvaluation {
    pub precision: Precision,
    pub metrics: MetricSet,
    pub confusion: ConfusionMatrix,
    pub predicted: Vec<usize>,
}

/// Metrics of the artifact's model on preprocessed samples.
pub fn evaluate_artifact(artifact: &ModelArtifact, samples: &[Sample]) -> Result<ArtifactEvaluation> {
    let model = artifact.load_model()?;
    let predicted = samples
        .iter()
        .map(|s| model.model.classify(&s.image))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let cm = confusion(&labels, &predicted, model.model.n_classes())?;
    Ok(ArtifactEvaluation {
        precision: artifact.precision(),
        metrics: compute_metrics(&cm, model.model.task)?,
        confusion: cm,
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BackboneId, BackboneSource};

    fn small_model() -> TrainedModel {
        let bb = Backbone::load_at(BackboneId::MobileNetV3Small, &BackboneSource::Random { seed: 1 }, 32).unwrap();
        let cfg = HeadConfig::new(&[(256, 0.1)], 1e-3).unwrap();
        let m = crate::model::build_model(Arc::new(bb), &cfg, TaskKind::Binary, 4).unwrap();
        TrainedModel::untrained(m, 4)
    }

    #[test]
    fn fp32_round_trip_is_exact() {
        let t = small_model();
        let a = export_fp32(&t).unwrap();
        let back = a.load_model().unwrap();
        assert_eq!(back.model.head, t.model.head);
        assert_eq!(back.model.backbone.digest(), t.model.backbone.digest());
        assert_eq!(a.meta.header_bytes + a.meta.payload_bytes, a.byte_size());
    }

    #[test]
    fn fp16_is_within_rounding() {
        let t = small_model();
        let q = quantize_fp16(&t).unwrap();
        let back = q.load_model().unwrap();
        for (a, b) in t.model.head.layers.iter().zip(&back.model.head.layers) {
            for (x, y) in a.weight.iter().zip(&b.weight) {
                if x.abs() > 6.2e-5 {
                    assert!(((x - y) / x).abs() <= 2f32.powi(-11));
                }
            }
        }
        assert_eq!(q.meta.payload_bytes, 2 * q.meta.parameter_count);
        assert!(q.meta.provenance.quantized_from.is_some());
    }

    #[test]
    fn corrupt_blobs_are_rejected() {
        let mut a = export_fp32(&small_model()).unwrap();
        a.blob.truncate(a.blob.len() - 1);
        assert!(a.load_model().is_err());
        a.blob[0] = b'X';
        assert!(a.load_model().is_err());
    }
}
