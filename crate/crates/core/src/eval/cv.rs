use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{aggregate, compute_metrics, confusion, ConfusionMatrix, MetricSet};
use crate::data::{make_stratified_folds, preprocess_image, DatasetManifest, FoldPlan, PreprocessConfig};
use crate::error::{Error, Result};
use crate::hpo::{run_hyperband, HyperbandConfig, SearchSpace, TrialConfig, TrialRecord};
use crate::labels::TaskKind;
use crate::model::{argmax, build_model, train, EmbeddingCache, Sample, TrainOptions, TrainedModel};
use crate::nn::Backbone;
use crate::rng::stream;

/// Decode and resize every manifest image at the backbone resolution.
/// Labels are the manifest task's target codes.
pub fn load_samples(manifest: &DatasetManifest, size: usize) -> Result<Vec<Sample>> {
    let config = PreprocessConfig::with_size(size as u32);
    manifest
        .records
        .par_iter()
        .map(|r| {
            let path = manifest.resolve(r);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok(Sample {
                id: r.id.clone(),
                image: Arc::new(preprocess_image(&bytes, &config)?),
                label: manifest.target(r),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Search,
    Retrain,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessEntry {
    pub fold: usize,
    pub phase: Phase,
    pub ids: Vec<String>,
}

/// Every record read per fold and phase.
#[derive(Debug, Default)]
pub struct AccessLog {
    entries: Mutex<Vec<AccessEntry>>,
}

impl AccessLog {
    pub fn entries(&self) -> Vec<AccessEntry> {
        self.entries.lock().expect("log lock").clone()
    }

    fn record(&self, fold: usize, phase: Phase, ids: &[String]) {
        self.entries.lock().expect("log lock").push(AccessEntry {
            fold,
            phase,
            ids: ids.to_vec(),
        });
    }

    /// Held-out records read before the test phase of their fold.
    pub fn leaks(&self, plan: &FoldPlan) -> Vec<(usize, String)> {
        let mut out = Vec::new();
        for e in self.entries().iter().filter(|e| e.phase != Phase::Test) {
            let held: BTreeSet<String> = plan.test_ids(e.fold).into_iter().collect();
            out.extend(e.ids.iter().filter(|id| held.contains(*id)).map(|id| (e.fold, id.clone())));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub k: usize,
    pub seed: u64,
    pub augment: bool,
    pub hyperband: HyperbandConfig,
    /// Overrides the default space implied by `augment`.
    pub space: Option<SearchSpace>,
    pub retrain_epochs: usize,
    pub patience: Option<usize>,
    pub batch_size: usize,
    /// Restrict to these folds (all when `None`).
    pub folds: Option<Vec<usize>>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            k: 10,
            seed: 42,
            augment: false,
            hyperband: HyperbandConfig::default(),
            space: None,
            retrain_epochs: 50,
            patience: Some(10),
            batch_size: 32,
            folds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPrediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: MetricSet,
    pub confusion: ConfusionMatrix,
    pub best_config: TrialConfig,
    pub search_score: f64,
    pub trials: Vec<TrialRecord>,
    pub seed: u64,
    pub epochs_trained: usize,
    pub predictions: Vec<TestPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub task: TaskKind,
    pub backbone: String,
    pub backbone_digest: String,
    pub augmentation: bool,
    pub k: usize,
    pub seed: u64,
    pub hyperband: HyperbandConfig,
    pub folds: Vec<FoldResult>,
    pub mean: MetricSet,
    pub std: MetricSet,
    pub pooled_confusion: ConfusionMatrix,
    pub notes: Vec<String>,
}

impl CvReport {
    /// Per-fold values of one metric, in fold order.
    pub fn fold_scores(&self, metric: &str) -> Vec<f64> {
        self.folds.iter().filter_map(|f| f.metrics.get(metric)).collect()
    }

    /// `mean (±std)` cells in the order accuracy, sensitivity, specificity, f1.
    pub fn table_row(&self) -> Vec<String> {
        ["accuracy", "sensitivity", "specificity", "f1"]
            .iter()
            .map(|m| format!("{:.3} (±{:.3})", self.mean.get(m).unwrap_or(0.0), self.std.get(m).unwrap_or(0.0)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Output of [`run_cross_validation`]: the report, the per-fold models and
/// the data access log.
#[derive(Debug)]
pub struct CvRun {
    pub report: CvReport,
    pub plan: FoldPlan,
    pub models: Vec<TrainedModel>,
    pub access: AccessLog,
}

/// Stratified k-fold evaluation with per-fold Hyperband on the dev split.
///
/// For each fold the search sees only the fold's train/validation records,
/// the chosen configuration is retrained on the training part (early
/// stopping on validation) and scored once on the held-out fold.
pub fn run_cross_validation(
    manifest: &DatasetManifest,
    samples: &[Sample],
    backbone: Arc<Backbone>,
    opts: &CvOptions,
) -> Result<CvRun> {
    let task = manifest.task;
    let plan = make_stratified_folds(manifest, opts.k, opts.seed)?;
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    for r in &manifest.records {
        if !by_id.contains_key(r.id.as_str()) {
            return Err(Error::invalid(format!("no image loaded for record {}", r.id)));
        }
    }
    let space = opts.space.clone().unwrap_or_else(|| SearchSpace::new(opts.augment));
    space.validate()?;
    let access = AccessLog::default();
    let cache = EmbeddingCache::new();
    let fetch = |fold: usize, phase: Phase, ids: &[String]| -> Vec<Sample> {
        access.record(fold, phase, ids);
        ids.iter().map(|id| by_id[id.as_str()].clone()).collect()
    };
    let folds: Vec<usize> = opts.folds.clone().unwrap_or_else(|| (0..opts.k).collect());
    let mut results = Vec::new();
    let mut models = Vec::new();
    for &fold in &folds {
        if fold >= opts.k {
            return Err(Error::invalid(format!("fold {fold} out of range for k={}", opts.k)));
        }
        let fold_seed = stream(opts.seed, &[0xF0, fold as u64]).next_u64();
        let search_train = fetch(fold, Phase::Search, &plan.train_ids(fold));
        let search_val = fetch(fold, Phase::Search, &plan.val_ids(fold));
        let objective = |config: &TrialConfig, resource: usize, seed: u64| -> Result<f64> {
            let model = build_model(backbone.clone(), &config.head, task, seed)?;
            let mut t = TrainOptions::new(&config.head, seed);
            t.max_epochs = resource;
            t.batch_size = opts.batch_size;
            t.patience = opts.patience;
            t.augment = config.augment;
            t.fold = Some(fold);
            let trained = train(model, &search_train, &search_val, &t, &cache)?;
            Ok(trained.history.iter().map(|h| h.val_accuracy).fold(0.0, f64::max))
        };
        let hb = HyperbandConfig {
            seed: fold_seed,
            ..opts.hyperband
        };
        let search = run_hyperband(&space, &objective, &hb)?;
        if search.trials.iter().all(|t| t.failed) {
            return Err(Error::invalid(format!("fold {fold}: every hyperband trial failed")));
        }
        let best = search.best.config.clone();

        let train_set = fetch(fold, Phase::Retrain, &plan.train_ids(fold));
        let val_set = fetch(fold, Phase::Retrain, &plan.val_ids(fold));
        let model = build_model(backbone.clone(), &best.head, task, fold_seed)?;
        let mut t = TrainOptions::new(&best.head, fold_seed);
        t.max_epochs = opts.retrain_epochs;
        t.batch_size = opts.batch_size;
        t.patience = opts.patience;
        t.augment = best.augment;
        t.fold = Some(fold);
        let trained = train(model, &train_set, &val_set, &t, &cache)?;

        let test_set = fetch(fold, Phase::Test, &plan.test_ids(fold));
        let test_feats = cache.embed_all(&backbone, &test_set)?;
        let predictions: Vec<TestPrediction> = test_set
            .iter()
            .zip(&test_feats)
            .map(|(s, f)| {
                let p = trained.model.predict_features(f)?;
                Ok(TestPrediction {
                    id: s.id.clone(),
                    label: s.label,
                    predicted: argmax(&p),
                    probabilities: p,
                })
            })
            .collect::<Result<_>>()?;
        let truth: Vec<usize> = predictions.iter().map(|p| p.label).collect();
        let pred: Vec<usize> = predictions.iter().map(|p| p.predicted).collect();
        let cm = confusion(&truth, &pred, task.n_classes())?;
        results.push(FoldResult {
            fold,
            metrics: compute_metrics(&cm, task)?,
            confusion: cm,
            best_config: best,
            search_score: search.best.score,
            trials: search.trials,
            seed: fold_seed,
            epochs_trained: trained.history.len(),
            predictions,
        });
        models.push(trained);
    }
    let agg = aggregate(&results.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>())?;
    let mut pooled = ConfusionMatrix::zeros(task.n_classes());
    for r in &results {
        pooled.merge(&r.confusion)?;
    }
    let mut notes = Vec::new();
    if agg.single_fold {
        notes.push("single fold: standard deviation reported as 0".into());
    }
    notes.extend(agg.mean.degenerate.iter().cloned());
    let report = CvReport {
        task,
        backbone: backbone.name().to_string(),
        backbone_digest: backbone.digest(),
        augmentation: opts.augment,
        k: opts.k,
        seed: opts.seed,
        hyperband: opts.hyperband,
        folds: results,
        mean: agg.mean,
        std: agg.std,
        pooled_confusion: pooled,
        notes,
    };
    Ok(CvRun {
        report,
        plan,
        models,
        access,
    })
}
