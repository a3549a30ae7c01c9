//! Transfer-learning classifiers: frozen backbone, trainable head.

mod embed;
mod head;
mod pca;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use embed::{extract_embeddings, EmbeddingCache, EmbeddingMatrix};
pub use head::{argmax, softmax, Adam, Dense, Head, HeadConfig, DENSE_CHOICES, LR_MAX, LR_MIN, MAX_DROPOUT, MAX_LAYERS};
pub use pca::{pca_project, PcaProjection};

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::labels::TaskKind;
use crate::nn::Backbone;
use crate::rng::stream;
use crate::tensor::ImageTensor;

/// A labelled, preprocessed image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Arc<ImageTensor>,
    pub label: usize,
}

/// Frozen backbone plus classification head.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Arc<Backbone>,
    pub head: Head,
    pub task: TaskKind,
}

pub fn build_model(backbone: Arc<Backbone>, head: &HeadConfig, task: TaskKind, seed: u64) -> Result<Model> {
    let head = Head::init(backbone.feature_dim(), head, task.n_classes(), seed)?;
    Ok(Model { backbone, head, task })
}

impl Model {
    pub fn n_classes(&self) -> usize {
        self.task.n_classes()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.head.parameter_count()
    }

    /// Class probabilities for a preprocessed image.
    pub fn predict(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.predict_features(&self.backbone.embed(image)?)
    }

    pub fn predict_features(&self, features: &[f32]) -> Result<Vec<f64>> {
        if features.len() != self.head.feature_dim() {
            return Err(Error::Shape {
                expected: format!("{} features", self.head.feature_dim()),
                actual: format!("{}", features.len()),
            });
        }
        Ok(self.head.probabilities(features))
    }

    /// Predicted class code.
    pub fn classify(&self, image: &ImageTensor) -> Result<usize> {
        Ok(argmax(&self.predict(image)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub fold: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub history: Vec<EpochStats>,
    /// Index into `history` of the epoch whose weights were kept.
    pub best_epoch: usize,
    pub provenance: Provenance,
}

impl TrainedModel {
    /// Wrap an untrained model, e.g. one with hand-set weights.
    pub fn untrained(model: Model, seed: u64) -> Self {
        Self {
            model,
            history: Vec::new(),
            best_epoch: 0,
            provenance: Provenance { fold: None, seed },
        }
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.model.predict(image)
    }

    pub fn head_config(&self) -> &HeadConfig {
        &self.model.head.config
    }

    /// Write `meta.json` and `head.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = StoredMeta {
            backbone: self.model.backbone.name().to_string(),
            backbone_digest: self.model.backbone.digest(),
            backbone_source: self.model.backbone.source().to_string(),
            head_config: self.model.head.config.clone(),
            layer_shapes: self.model.head.layers.iter().map(|l| (l.inputs, l.outputs)).collect(),
            task: self.model.task,
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            provenance: self.provenance.clone(),
        };
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
        let bytes: Vec<u8> = self
            .model
            .head
            .layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let blob = dir.join("head.bin");
        fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))
    }

    /// Load a saved model onto `backbone`, which must match the stored digest.
    pub fn load(dir: impl AsRef<Path>, backbone: Arc<Backbone>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: StoredMeta = serde_json::from_str(&text)?;
        if meta.backbone_digest != backbone.digest() {
            return Err(Error::Artifact(format!(
                "model was trained on {} weights {}, supplied backbone has {}",
                meta.backbone,
                meta.backbone_digest,
                backbone.digest()
            )));
        }
        let blob = dir.join("head.bin");
        let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        let mut values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let expected: usize = meta.layer_shapes.iter().map(|(i, o)| (i + 1) * o).sum();
        if bytes.len() != expected * 4 {
            return Err(Error::Artifact(format!("head.bin holds {} bytes, expected {}", bytes.len(), expected * 4)));
        }
        let layers = meta
            .layer_shapes
            .iter()
            .map(|&(inputs, outputs)| Dense {
                inputs,
                outputs,
                weight: values.by_ref().take(inputs * outputs).collect(),
                bias: values.by_ref().take(outputs).collect(),
            })
            .collect();
        let head = Head::from_layers(meta.head_config, layers)?;
        Ok(Self {
            model: Model {
                backbone,
                head,
                task: meta.task,
            },
            history: meta.history,
            best_epoch: meta.best_epoch,
            provenance: meta.provenance,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StoredMeta {
    backbone: String,
    backbone_digest: String,
    backbone_source: String,
    head_config: HeadConfig,
    layer_shapes: Vec<(usize, usize)>,
    task: TaskKind,
    history: Vec<EpochStats>,
    best_epoch: usize,
    provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a new best validation accuracy.
    pub patience: Option<usize>,
    pub learning_rate: f64,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
    pub fold: Option<usize>,
}

impl TrainOptions {
    /// Defaults: 50 epochs, batch 32, patience 10, the config's learning rate.
    pub fn new(config: &HeadConfig, seed: u64) -> Self {
        Self {
            max_epochs: 50,
            batch_size: 32,
            patience: Some(10),
            learning_rate: config.learning_rate,
            augment: None,
            seed,
            fold: None,
        }
    }
}

/// Train the head of `model`; backbone parameters are never touched.
///
/// Returns the weights of the epoch with the best validation accuracy (the
/// training accuracy when `val` is empty).
pub fn train(
    mut model: Model,
    train: &[Sample],
    val: &[Sample],
    opts: &TrainOptions,
    cache: &EmbeddingCache,
) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if opts.max_epochs == 0 || opts.batch_size == 0 {
        return Err(Error::invalid("max_epochs and batch_size must be positive"));
    }
    if let Some(a) = &opts.augment {
        a.validate()?;
    }
    let k = model.n_classes();
    if let Some(s) = train.iter().chain(val).find(|s| s.label >= k) {
        return Err(Error::invalid(format!("label {} of {} out of range", s.label, s.id)));
    }
    let backbone = model.backbone.clone();
    let fixed_train = match opts.augment {
        None => Some(cache.embed_all(&backbone, train)?),
        Some(_) => None,
    };
    let val_feats = cache.embed_all(&backbone, val)?;
    let val_x: Vec<f32> = val_feats.iter().flat_map(|f| f.iter().copied()).collect();
    let val_y: Vec<usize> = val.iter().map(|s| s.label).collect();
    let dim = model.head.feature_dim();

    let mut adam = Adam::new(&model.head, opts.learning_rate);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Head)> = None;
    for epoch in 0..opts.max_epochs {
        let feats: Vec<Arc<Vec<f32>>> = match (&fixed_train, &opts.augment) {
            (Some(f), _) => f.clone(),
            (None, Some(cfg)) => train
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut rng = stream(opts.seed, &[0xA6, epoch as u64, i as u64]);
                    let img = augment(&s.image, cfg, &mut rng);
                    backbone.embed(&img).map(Arc::new)
                })
                .collect::<Result<_>>()?,
            (None, None) => unreachable!(),
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(opts.seed, &[0x5F, epoch as u64]));
        let (mut loss, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            let mut x = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                x.extend_from_slice(&feats[i]);
            }
            let y: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let mut rng = stream(opts.seed, &[0xD0, epoch as u64, b as u64]);
            let (l, c, grads) = model.head.batch_gradients(&x, &y, Some(&mut rng));
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1 });
            }
            loss += l;
            correct += c;
            adam.update(&mut model.head, &grads);
        }
        let n = train.len() as f64;
        let (val_loss, val_accuracy) = evaluate_features(&model.head, &val_x, &val_y);
        if !val_loss.is_finite() && !val.is_empty() {
            return Err(Error::NonFiniteLoss { epoch: epoch + 1 });
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            train_loss: loss / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        };
        let monitor = if val.is_empty() { stats.train_accuracy } else { val_accuracy };
        history.push(stats);
        match &best {
            Some((score, _, _)) if monitor <= *score => {}
            _ => best = Some((monitor, epoch, model.head.clone())),
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if opts.patience.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
    }
    let (_, best_epoch, head) = best.expect("at least one epoch");
    model.head = head;
    Ok(TrainedModel {
        model,
        history,
        best_epoch,
        provenance: Provenance {
            fold: opts.fold,
            seed: opts.seed,
        },
    })
}

/// Mean cross-entropy and accuracy of `head` on stacked features.
pub fn evaluate_features(head: &Head, x: &[f32], y: &[usize]) -> (f64, f64) {
    if y.is_empty() {
        return (0.0, 0.0);
    }
    let logits = head.logits_batch(x, y.len());
    let k = head.n_classes();
    let (mut loss, mut correct) = (0.0, 0);
    for (r, &t) in y.iter().enumerate() {
        let p = softmax(&logits[r * k..(r + 1) * k]);
        loss -= p[t].max(1e-300).ln();
        if argmax(&p) == t {
            correct += 1;
        }
    }
    (loss / y.len() as f64, correct as f64 / y.len() as f64)
}
