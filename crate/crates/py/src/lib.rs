//! Python module `mpox_screen._native`.
//!
//! Structured results cross the boundary as plain dicts and lists built from
//! the core types' JSON form.

use std::path::PathBuf;
use std::sync::Arc;

use mpox_screen::data::{
    load_manifest, make_stratified_folds, preprocess_image, relabel_binary, scan_image_folder, validate_manifest,
    CropRect, DatasetManifest, PreprocessConfig,
};
use mpox_screen::deploy::{benchmark_inference, export_fp32, quantize_fp16, BenchmarkOptions, ModelArtifact};
use mpox_screen::error::Error;
use mpox_screen::eval::confusion;
use mpox_screen::hpo::hyperband_schedule as schedule;
use mpox_screen::labels::TaskKind;
use mpox_screen::model::{build_model, HeadConfig, TrainedModel};
use mpox_screen::nn::{Backbone, BackboneId, BackboneSource};
use mpox_screen::stats::{self, SampleVector};
use mpox_screen::tensor::ValueRange;
use mpox_screen::xai::{grad_cam, overlay, Colormap};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for mpox_screen::error::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn to_py(py: Python<'_>, value: &impl Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().py()
}

fn crop_of(crop: Option<(u32, u32, u32, u32)>) -> Option<CropRect> {
    crop.map(|(x, y, width, height)| CropRect { x, y, width, height })
}

/// Image records with labels and content hashes.
#[pyclass(module = "mpox_screen", frozen)]
struct Manifest {
    inner: DatasetManifest,
}

#[pymethods]
impl Manifest {
    /// Read a manifest CSV.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_manifest(path).py()?,
        })
    }

    /// Build a manifest from a `<class>/<image>` directory.
    #[staticmethod]
    #[pyo3(signature = (root, source = "local"))]
    fn scan(root: PathBuf, source: &str) -> PyResult<Self> {
        Ok(Self {
            inner: scan_image_folder(root, source).py()?,
        })
    }

    /// Same records with Mpox/Others targets.
    fn binary(&self) -> Self {
        Self {
            inner: relabel_binary(&self.inner),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.inner.task.as_str()
    }

    #[getter]
    fn version(&self) -> String {
        self.inner.version.clone()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.id.clone()).collect()
    }

    /// Source label name per record, in manifest order.
    #[getter]
    fn labels(&self) -> Vec<&'static str> {
        self.inner.records.iter().map(|r| r.label.name()).collect()
    }

    /// Integrity checks as a dict with `checks` and `passed`.
    fn validate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &validate_manifest(&self.inner))
    }

    fn to_csv(&self) -> PyResult<String> {
        self.inner.to_csv().py()
    }

    /// Stratified k-fold plan.
    #[pyo3(signature = (k = 10, seed = 42))]
    fn folds(&self, k: usize, seed: u64) -> PyResult<FoldPlan> {
        Ok(FoldPlan {
            inner: make_stratified_folds(&self.inner, k, seed).py()?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Manifest({} records, {})", self.inner.len(), self.inner.task)
    }
}

#[pyclass(module = "mpox_screen", frozen)]
struct FoldPlan {
    inner: mpox_screen::data::FoldPlan,
}

#[pymethods]
impl FoldPlan {
    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn test_ids(&self, fold: usize) -> Vec<String> {
        self.inner.test_ids(fold)
    }

    fn train_ids(&self, fold: usize) -> Vec<String> {
        self.inner.train_ids(fold)
    }

    fn val_ids(&self, fold: usize) -> Vec<String> {
        self.inner.val_ids(fold)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: mpox_screen::data::FoldPlan::from_json(text).py()?,
        })
    }
}

/// A classifier: frozen backbone plus trained head.
#[pyclass(module = "mpox_screen", frozen)]
struct Model {
    inner: Arc<TrainedModel>,
}

impl Model {
    fn preprocess(&self, image: &[u8], crop: Option<(u32, u32, u32, u32)>) -> PyResult<mpox_screen::tensor::ImageTensor> {
        let (h, w) = self.inner.model.backbone.input_hw();
        let cfg = PreprocessConfig {
            target_height: h as u32,
            target_width: w as u32,
            value_range: ValueRange::Raw,
            crop: crop_of(crop),
        };
        preprocess_image(image, &cfg).py()
    }
}

#[pymethods]
impl Model {
    /// Load an artifact directory written by `cv --save-models` or `quantize`.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let model = ModelArtifact::read(dir).py()?.load_model().py()?;
        Ok(Self { inner: Arc::new(model) })
    }

    /// Untrained model over randomly initialised backbone weights.
    #[staticmethod]
    #[pyo3(signature = (backbone, task = "multiclass", size = 224, seed = 0))]
    fn random(backbone: &str, task: &str, size: usize, seed: u64) -> PyResult<Self> {
        let id: BackboneId = parse(backbone)?;
        let task: TaskKind = parse(task)?;
        let bb = Backbone::load_at(id, &BackboneSource::Random { seed }, size).py()?;
        let cfg = HeadConfig::new(&[(256, 0.0)], 1e-3).py()?;
        let model = build_model(Arc::new(bb), &cfg, task, seed).py()?;
        Ok(Self {
            inner: Arc::new(TrainedModel::untrained(model, seed)),
        })
    }

    #[getter]
    fn backbone(&self) -> String {
        self.inner.model.backbone.name().to_string()
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.inner.model.task.as_str()
    }

    #[getter]
    fn class_names(&self) -> Vec<&'static str> {
        self.inner.model.task.class_names()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        self.inner.model.backbone.input_hw()
    }

    /// Class probabilities for encoded image bytes; `crop` is `(x, y, w, h)`.
    #[pyo3(signature = (image, crop = None))]
    fn predict(&self, py: Python<'_>, image: &[u8], crop: Option<(u32, u32, u32, u32)>) -> PyResult<Vec<(&'static str, f64)>> {
        let tensor = self.preprocess(image, crop)?;
        let probs = py.detach(|| self.inner.predict(&tensor)).py()?;
        Ok(self.class_names().into_iter().zip(probs).collect())
    }

    /// Grad-CAM heatmap as rows of floats in `[0, 1]`, plus the overlay as
    /// PNG bytes.
    #[pyo3(signature = (image, target_class, crop = None, alpha = 0.4, colormap = "inferno"))]
    fn explain(
        &self,
        py: Python<'_>,
        image: &[u8],
        target_class: usize,
        crop: Option<(u32, u32, u32, u32)>,
        alpha: f32,
        colormap: &str,
    ) -> PyResult<(Vec<Vec<f32>>, Vec<u8>)> {
        let tensor = self.preprocess(image, crop)?;
        let cmap: Colormap = parse(colormap)?;
        let (r, png) = py
            .detach(|| {
                let r = grad_cam(&self.inner.model, &tensor, target_class)?;
                let png = overlay(&tensor, &r, alpha, cmap)?.to_png()?;
                Ok::<_, Error>((r, png))
            })
            .py()?;
        let rows = r.heatmap.chunks(r.width).map(<[f32]>::to_vec).collect();
        Ok((rows, png))
    }

    /// Write an fp32 or fp16 artifact; returns its byte size.
    #[pyo3(signature = (dir, precision = "fp32"))]
    fn export(&self, dir: PathBuf, precision: &str) -> PyResult<u64> {
        let artifact = match precision {
            "fp32" => export_fp32(&self.inner),
            "fp16" => quantize_fp16(&self.inner),
            other => return Err(PyValueError::new_err(format!("unknown precision {other:?}"))),
        }
        .py()?;
        artifact.write(dir).py()?;
        Ok(artifact.byte_size())
    }

    /// Latency report for single-image inference at the given precision.
    #[pyo3(signature = (precision = "fp16", runs = 50, warmup = 5, threads = 4))]
    fn benchmark(&self, py: Python<'_>, precision: &str, runs: usize, warmup: usize, threads: usize) -> PyResult<Py<PyAny>> {
        let artifact = match precision {
            "fp32" => export_fp32(&self.inner),
            "fp16" => quantize_fp16(&self.inner),
            other => return Err(PyValueError::new_err(format!("unknown precision {other:?}"))),
        }
        .py()?;
        let opts = BenchmarkOptions {
            runs,
            warmup,
            threads,
            ..BenchmarkOptions::default()
        };
        let report = py.detach(|| benchmark_inference(&artifact, &opts)).py()?;
        to_py(py, &report)
    }

    fn __repr__(&self) -> String {
        format!("Model({}, {})", self.backbone(), self.task())
    }
}

/// Metrics of predicted against true class codes.
#[pyfunction]
#[pyo3(signature = (truth, predicted, task = "multiclass"))]
fn compute_metrics(py: Python<'_>, truth: Vec<usize>, predicted: Vec<usize>, task: &str) -> PyResult<Py<PyAny>> {
    let task: TaskKind = parse(task)?;
    let cm = confusion(&truth, &predicted, task.n_classes()).py()?;
    to_py(py, &mpox_screen::eval::compute_metrics(&cm, task).py()?)
}

/// Brackets of `(n, r)` rungs, most aggressive first.
#[pyfunction]
#[pyo3(signature = (max_resource = 27, eta = 3))]
fn hyperband_schedule(max_resource: usize, eta: usize) -> PyResult<Vec<Vec<(usize, usize)>>> {
    Ok(schedule(max_resource, eta)
        .py()?
        .into_iter()
        .map(|b| b.rungs.into_iter().map(|r| (r.n, r.r)).collect())
        .collect())
}

fn sample(label: &str, values: Vec<f64>) -> PyResult<SampleVector> {
    SampleVector::new(label, values).py()
}

/// Normality, ANOVA-RM and Tukey HSD over per-fold scores keyed by model.
#[pyfunction]
#[pyo3(signature = (scores, metric = "accuracy"))]
fn compare_models(py: Python<'_>, scores: Vec<(String, Vec<f64>)>, metric: &str) -> PyResult<Py<PyAny>> {
    let samples = scores.into_iter().map(|(k, v)| sample(&k, v)).collect::<PyResult<Vec<_>>>()?;
    to_py(py, &stats::compare_models(&samples, metric).py()?)
}

#[pyfunction]
fn shapiro_wilk(py: Python<'_>, x: Vec<f64>) -> PyResult<Py<PyAny>> {
    to_py(py, &stats::shapiro_wilk(&sample("x", x)?).py()?)
}

/// Two-sample t-test; Welch's unless `equal_variance`.
#[pyfunction]
#[pyo3(signature = (x, y, equal_variance = false))]
fn t_test(py: Python<'_>, x: Vec<f64>, y: Vec<f64>, equal_variance: bool) -> PyResult<Py<PyAny>> {
    to_py(py, &stats::t_test_independent(&sample("x", x)?, &sample("y", y)?, equal_variance).py()?)
}

#[pyfunction]
fn wilcoxon_rank_sum(py: Python<'_>, x: Vec<f64>, y: Vec<f64>) -> PyResult<Py<PyAny>> {
    to_py(py, &stats::wilcoxon_rank_sum(&sample("x", x)?, &sample("y", y)?).py()?)
}

#[pyfunction]
#[pyo3(signature = (rows, dims = 2))]
fn pca_project(py: Python<'_>, rows: Vec<Vec<f64>>, dims: usize) -> PyResult<Py<PyAny>> {
    to_py(py, &mpox_screen::model::pca_project(&rows, dims).py()?)
}

#[pymodule(name = "_native")]
fn native(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Manifest>()?;
    m.add_class::<FoldPlan>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(hyperband_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(compare_models, m)?)?;
    m.add_function(wrap_pyfunction!(shapiro_wilk, m)?)?;
    m.add_function(wrap_pyfunction!(t_test, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon_rank_sum, m)?)?;
    m.add_function(wrap_pyfunction!(pca_project, m)?)?;
    Ok(())
}
