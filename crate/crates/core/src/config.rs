//! Pipeline configuration read from a TOML file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_manifest, relabel_binary, scan_image_folder, DatasetManifest};
use crate::error::{Error, Result};
use crate::labels::TaskKind;
use crate::nn::{BackboneId, BackboneSource, BACKBONE_DIR_ENV};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Manifest CSV, or a directory laid out as `<class>/<image>`.
    pub manifest: Option<PathBuf>,
    pub backbones: Vec<String>,
    /// Weight directory, `random:<seed>` or `pattern`. Falls back to the
    /// backbone directory environment variable.
    pub backbone_weights: Option<String>,
    /// Square input resolution; the backbones' native size is 224.
    pub image_size: usize,
    pub task: TaskKind,
    pub augment: bool,
    pub hyperband_r: usize,
    pub hyperband_eta: usize,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub retrain_epochs: usize,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub output_dir: PathBuf,
    pub host: String,
    pub port: u16,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            backbones: BackboneId::ALL.iter().map(|b| b.name().to_string()).collect(),
            backbone_weights: None,
            image_size: 224,
            task: TaskKind::Multiclass,
            augment: false,
            hyperband_r: 27,
            hyperband_eta: 3,
            k: 10,
            seeds: vec![42],
            retrain_epochs: 50,
            patience: 10,
            batch_size: 32,
            output_dir: PathBuf::from("runs"),
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

/// Field-level configuration problems.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub problems: Vec<(String, String)>,
}

impl ConfigError {
    fn single(field: &str, message: impl Into<String>) -> Self {
        Self {
            problems: vec![(field.into(), message.into())],
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (field, msg)) in self.problems.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "config field `{field}`: {msg}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .map(str::to_string)
                .or_else(|| {
                    e.span().and_then(|s| {
                        let line = text[..s.start].rsplit('\n').next().unwrap_or_default();
                        let key = text[s.start - line.len()..].split('=').next()?.trim();
                        (!key.is_empty() && !key.contains('\n')).then(|| key.to_string())
                    })
                })
                .unwrap_or_else(|| "<file>".into());
            ConfigError::single(&field, msg)
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::single("<file>", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every problem at once, so a bad file can be fixed in one pass.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        let mut bad = |field: &str, msg: String| problems.push((field.to_string(), msg));
        if self.backbones.is_empty() {
            bad("backbones", "at least one backbone is required".into());
        }
        for b in &self.backbones {
            if let Err(e) = b.parse::<BackboneId>() {
                bad("backbones", e.to_string());
            }
        }
        if let Some(w) = &self.backbone_weights {
            if let Err(e) = parse_weights(w) {
                bad("backbone_weights", e.to_string());
            }
        }
        if self.image_size < 32 {
            bad("image_size", format!("must be at least 32, got {}", self.image_size));
        }
        if self.hyperband_r < 1 {
            bad("hyperband_r", "must be at least 1".into());
        }
        if self.hyperband_eta < 2 {
            bad("hyperband_eta", format!("must be at least 2, got {}", self.hyperband_eta));
        }
        if self.k < 2 {
            bad("k", format!("must be at least 2, got {}", self.k));
        }
        if self.seeds.is_empty() {
            bad("seeds", "at least one explicit seed is required".into());
        }
        if self.retrain_epochs < 1 {
            bad("retrain_epochs", "must be at least 1".into());
        }
        if self.batch_size < 1 {
            bad("batch_size", "must be at least 1".into());
        }
        if self.host.trim().is_empty() {
            bad("host", "must not be empty".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems })
        }
    }

    /// Digest of the fields that define the evaluation protocol.
    ///
    /// Backbone, task and augmentation choices are left out: runs that differ
    /// only in those share a directory and stay comparable.
    pub fn digest(&self) -> String {
        let key = serde_json::json!({
            "manifest": self.manifest,
            "backbone_weights": self.backbone_weights,
            "image_size": self.image_size,
            "hyperband": [self.hyperband_r, self.hyperband_eta],
            "k": self.k,
            "seeds": self.seeds,
            "retrain_epochs": self.retrain_epochs,
            "patience": self.patience,
            "batch_size": self.batch_size,
        });
        hex::encode(&Sha256::digest(key.to_string().as_bytes())[..6])
    }

    /// `<output_dir>/run-<digest>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(format!("run-{}", self.digest()))
    }

    pub fn backbone_ids(&self) -> Result<Vec<BackboneId>> {
        self.backbones.iter().map(|b| b.parse()).collect()
    }

    pub fn backbone_source(&self) -> Result<BackboneSource> {
        match &self.backbone_weights {
            Some(w) => parse_weights(w),
            None => BackboneSource::from_env().ok_or_else(|| {
                Error::BackboneUnavailable(format!(
                    "set `backbone_weights` or {BACKBONE_DIR_ENV} (use `random:<seed>` for untrained weights)"
                ))
            }),
        }
    }

    /// The manifest, relabelled for the configured task.
    pub fn load_manifest(&self) -> Result<DatasetManifest> {
        let path = self
            .manifest
            .as_ref()
            .ok_or_else(|| Error::invalid("config field `manifest` is not set"))?;
        if !path.exists() {
            return Err(Error::invalid(format!(
                "config field `manifest`: {} does not exist",
                path.display()
            )));
        }
        let m = if path.is_dir() {
            scan_image_folder(path, "local")?
        } else {
            load_manifest(path)?
        };
        Ok(match self.task {
            TaskKind::Binary => relabel_binary(&m),
            TaskKind::Multiclass => m,
        })
    }
}

fn parse_weights(s: &str) -> Result<BackboneSource> {
    if s == "pattern" {
        return Ok(BackboneSource::Pattern);
    }
    if let Some(seed) = s.strip_prefix("random:") {
        return seed
            .parse()
            .map(|seed| BackboneSource::Random { seed })
            .map_err(|_| Error::invalid(format!("bad seed in {s:?}")));
    }
    Ok(BackboneSource::Pretrained(PathBuf::from(s)))
}
