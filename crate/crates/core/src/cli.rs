//! Command-line entry point for the whole pipeline.
//!
//! Every subcommand reads the pipeline configuration (file values, then
//! flags) and writes its outputs under `<output_dir>/run-<digest>/`.
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::net::ToSocketAddrs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, PipelineConfig};
use crate::data::{make_stratified_folds, preprocess_image, relabel_binary, validate_manifest, CropRect, DatasetManifest, PreprocessConfig};
use crate::deploy::{
    benchmark_inference, evaluate_artifact, export_fp32, quantize_fp16, BenchmarkOptions, BenchmarkReport,
    ModelArtifact, Precision,
};
use crate::error::{Error, Result};
use crate::eval::{load_samples, run_cross_validation, CvOptions, CvReport, MetricSet};
use crate::hpo::{exploration_plot_data, write_trial_log, HyperbandConfig};
use crate::labels::TaskKind;
use crate::model::{argmax, build_model, extract_embeddings, HeadConfig, TrainedModel};
use crate::nn::{Backbone, BackboneId};
use crate::service::{serve, AppState};
use crate::stats::{compare_augmentation_reports, compare_cv_reports, AugmentationComparison, ComparisonReport};
use crate::tensor::ValueRange;
use crate::xai::{export, grad_cam_at, overlay, Colormap};

#[derive(Debug, Parser)]
#[command(name = "mpox-screen", version, about = "Skin-lesion screening pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides for configuration file values.
#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline configuration file (TOML)
    #[arg(long, short = 'c', global = true)]
    pub config: Option<PathBuf>,
    /// Manifest CSV or `<class>/<image>` directory
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Root for run directories
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Backbone weight directory, `random:<seed>` or `pattern`
    #[arg(long, global = true)]
    pub backbone_weights: Option<String>,
    /// Square input resolution
    #[arg(long, global = true)]
    pub image_size: Option<usize>,
    /// binary or multiclass
    #[arg(long, global = true)]
    pub task: Option<TaskKind>,
    /// Number of cross-validation folds
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Seed; repeat for several runs
    #[arg(long = "seed", global = true)]
    pub seeds: Vec<u64>,
    /// Hyperband maximum epochs per trial
    #[arg(long, global = true)]
    pub hyperband_r: Option<usize>,
    /// Hyperband reduction factor
    #[arg(long, global = true)]
    pub eta: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check manifest integrity and class balance
    Validate,
    /// Write the stratified fold plan for every seed
    Folds,
    /// Cross-validated evaluation with per-fold Hyperband search
    Cv(CvArgs),
    /// Statistical comparison of cross-validation reports
    Stats(StatsArgs),
    /// Grad-CAM heatmaps and overlays for single images
    Xai(XaiArgs),
    /// Convert an fp32 artifact to fp16
    Quantize(QuantizeArgs),
    /// Single-image inference latency benchmark
    Bench(BenchArgs),
    /// PCA projection of backbone embeddings
    Embed(EmbedArgs),
    /// HTTP inference service
    Serve(ServeArgs),
    /// Collate reports into summary tables and plot data
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CvArgs {
    /// Backbone to evaluate; repeat for several (default: configured list)
    #[arg(long = "backbone")]
    pub backbones: Vec<String>,
    /// Search augmentation parameters alongside the head
    #[arg(long, conflicts_with = "no_augment")]
    pub augment: bool,
    /// Search the head only
    #[arg(long)]
    pub no_augment: bool,
    /// Worker threads for trials and feature extraction
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Run only these folds (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub folds: Option<Vec<usize>>,
    /// Epochs for the final retraining of each fold
    #[arg(long)]
    pub retrain_epochs: Option<usize>,
    /// Write each fold's model as an fp32 artifact
    #[arg(long)]
    pub save_models: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Metric to compare
    #[arg(long, default_value = "accuracy")]
    pub metric: String,
    /// Report files (default: every report in the run directory)
    #[arg(long = "report")]
    pub reports: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct XaiArgs {
    /// Artifact directory
    #[arg(long)]
    pub model: PathBuf,
    /// Image file; repeat for several
    #[arg(long = "image")]
    pub images: Vec<PathBuf>,
    /// Manifest record id; repeat for several
    #[arg(long = "id")]
    pub ids: Vec<String>,
    /// Target class code (default: predicted class)
    #[arg(long)]
    pub class: Option<usize>,
    /// Backbone node to explain (default: last convolution)
    #[arg(long)]
    pub layer: Option<String>,
    /// Heatmap colour scale
    #[arg(long, value_enum, default_value_t = CliColormap::Inferno)]
    pub colormap: CliColormap,
    /// Heatmap opacity in [0, 1]
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f32,
    /// Crop rectangle `x,y,width,height` in source pixels
    #[arg(long, value_parser = parse_crop)]
    pub crop: Option<CropRect>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CliColormap {
    Inferno,
    Jet,
}

impl From<CliColormap> for Colormap {
    fn from(c: CliColormap) -> Self {
        match c {
            CliColormap::Inferno => Colormap::Inferno,
            CliColormap::Jet => Colormap::Jet,
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// fp32 artifact directory
    #[arg(long)]
    pub model: PathBuf,
    /// Destination (default: run directory)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also score both precisions on every manifest image
    #[arg(long)]
    pub evaluate: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Artifact directory
    #[arg(long, conflicts_with = "backbone")]
    pub model: Option<PathBuf>,
    /// Benchmark an untrained head on this backbone instead
    #[arg(long)]
    pub backbone: Option<String>,
    /// Precision for `--backbone` runs
    #[arg(long, value_enum, default_value_t = CliPrecision::Fp16)]
    pub precision: CliPrecision,
    /// Threads for inference
    #[arg(long, default_value_t = 4)]
    pub threads: usize,
    /// Timed runs
    #[arg(long, default_value_t = 50)]
    pub runs: usize,
    /// Untimed warm-up runs
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Lock file serializing benchmarks on this host
    #[arg(long)]
    pub lock: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CliPrecision {
    Fp32,
    Fp16,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Backbone (default: first configured)
    #[arg(long, conflicts_with = "model")]
    pub backbone: Option<String>,
    /// Use the backbone of this artifact
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Principal components to keep
    #[arg(long, default_value_t = 2)]
    pub dims: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory of artifact directories
    #[arg(long)]
    pub models: PathBuf,
    /// Bind address (default: configured host)
    #[arg(long)]
    pub host: Option<String>,
    /// Bind port (default: configured port)
    #[arg(long)]
    pub port: Option<u16>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metric for the statistical summary
    #[arg(long, default_value = "accuracy")]
    pub metric: String,
}

fn parse_crop(s: &str) -> std::result::Result<CropRect, String> {
    let v: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad crop component {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, width, height] => Ok(CropRect { x, y, width, height }),
        _ => Err("crop needs four values: x,y,width,height".into()),
    }
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let outcome = resolve_config(&cli.global)
        .map_err(CliError::from)
        .and_then(|cfg| execute(&cli.command, &cfg));
    match outcome {
        Ok(()) => 0,
        Err(CliError::Config(m)) => {
            eprintln!("{m}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// File values, then flags; validated.
pub fn resolve_config(g: &GlobalArgs) -> std::result::Result<PipelineConfig, ConfigError> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = &g.manifest {
        cfg.manifest = Some(v.clone());
    }
    if let Some(v) = &g.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &g.backbone_weights {
        cfg.backbone_weights = Some(v.clone());
    }
    if let Some(v) = g.image_size {
        cfg.image_size = v;
    }
    if let Some(v) = g.task {
        cfg.task = v;
    }
    if let Some(v) = g.k {
        cfg.k = v;
    }
    if !g.seeds.is_empty() {
        cfg.seeds = g.seeds.clone();
    }
    if let Some(v) = g.hyperband_r {
        cfg.hyperband_r = v;
    }
    if let Some(v) = g.eta {
        cfg.hyperband_eta = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cmd: &Command, cfg: &PipelineConfig) -> CliResult<()> {
    match cmd {
        Command::Validate => cmd_validate(cfg),
        Command::Folds => cmd_folds(cfg),
        Command::Cv(a) => cmd_cv(cfg, a),
        Command::Stats(a) => cmd_stats(cfg, a),
        Command::Xai(a) => cmd_xai(cfg, a),
        Command::Quantize(a) => cmd_quantize(cfg, a),
        Command::Bench(a) => cmd_bench(cfg, a),
        Command::Embed(a) => cmd_embed(cfg, a),
        Command::Serve(a) => cmd_serve(cfg, a),
        Command::Report(a) => cmd_report(cfg, a),
    }
}

fn manifest(cfg: &PipelineConfig) -> CliResult<DatasetManifest> {
    match &cfg.manifest {
        None => Err(CliError::Config("config field `manifest`: not set".into())),
        Some(p) if !p.exists() => Err(CliError::Config(format!(
            "config field `manifest`: {} does not exist",
            p.display()
        ))),
        Some(_) => Ok(cfg.load_manifest()?),
    }
}

fn for_task(m: &DatasetManifest, task: TaskKind) -> DatasetManifest {
    match task {
        TaskKind::Binary => relabel_binary(m),
        TaskKind::Multiclass => DatasetManifest {
            task,
            ..m.clone()
        },
    }
}

fn backbone_id(name: &str) -> CliResult<BackboneId> {
    name.parse().map_err(|e: Error| CliError::Config(format!("--backbone: {e}")))
}

fn load_backbone(cfg: &PipelineConfig, id: BackboneId) -> CliResult<Backbone> {
    let source = cfg
        .backbone_source()
        .map_err(|e| CliError::Config(format!("config field `backbone_weights`: {e}")))?;
    Ok(Backbone::load_at(id, &source, cfg.image_size)?)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_artifact(dir: &Path) -> CliResult<ModelArtifact> {
    if !dir.exists() {
        return Err(CliError::Config(format!("--model: {} does not exist", dir.display())));
    }
    Ok(ModelArtifact::read(dir)?)
}

fn dir_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| "model".into(), |n| n.to_string_lossy().into_owned())
}

fn cmd_validate(cfg: &PipelineConfig) -> CliResult<()> {
    #[derive(Serialize)]
    struct Out<'a> {
        manifest_version: &'a str,
        records: usize,
        class_counts: BTreeMap<usize, (String, usize)>,
        report: crate::data::ValidationReport,
    }
    let m = manifest(cfg)?;
    let report = validate_manifest(&m);
    let passed = report.passed;
    for c in &report.checks {
        println!("{:<16} {}", c.name, if c.passed { "ok" } else { "FAILED" });
    }
    write_json(
        &cfg.run_dir().join("validation.json"),
        &Out {
            manifest_version: &m.version,
            records: m.len(),
            class_counts: m.class_counts(),
            report,
        },
    )?;
    if passed {
        Ok(())
    } else {
        Err(Error::invalid("manifest failed validation; see validation.json").into())
    }
}

fn cmd_folds(cfg: &PipelineConfig) -> CliResult<()> {
    let m = manifest(cfg)?;
    for &seed in &cfg.seeds {
        let plan = make_stratified_folds(&m, cfg.k, seed)?;
        let path = cfg.run_dir().join("folds").join(format!("folds_k{}_seed{seed}.json", cfg.k));
        ensure_dir(path.parent().expect("has parent"))?;
        plan.write(&path)?;
        println!("wrote {} (fold sizes {:?})", path.display(), plan.fold_sizes());
    }
    Ok(())
}

/// File stem shared by a report, its trial logs and its fold models.
pub fn cv_stem(backbone: &str, task: TaskKind, augment: bool, seed: u64) -> String {
    format!("{backbone}_{task}_{}_seed{seed}", if augment { "aug" } else { "noaug" })
}

fn cmd_cv(cfg: &PipelineConfig, a: &CvArgs) -> CliResult<()> {
    let augment = if a.augment {
        true
    } else if a.no_augment {
        false
    } else {
        cfg.augment
    };
    let names = if a.backbones.is_empty() { &cfg.backbones } else { &a.backbones };
    let ids = names.iter().map(|n| backbone_id(n)).collect::<CliResult<Vec<_>>>()?;
    if a.jobs == Some(0) {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let m = manifest(cfg)?;
    let samples = load_samples(&m, cfg.image_size)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = a.jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let dir = cfg.run_dir().join("cv");
    for id in ids {
        let backbone = Arc::new(load_backbone(cfg, id)?);
        for &seed in &cfg.seeds {
            let opts = CvOptions {
                k: cfg.k,
                seed,
                augment,
                hyperband: HyperbandConfig {
                    max_resource: cfg.hyperband_r,
                    eta: cfg.hyperband_eta,
                    seed: 0,
                },
                space: None,
                retrain_epochs: a.retrain_epochs.unwrap_or(cfg.retrain_epochs),
                patience: (cfg.patience > 0).then_some(cfg.patience),
                batch_size: cfg.batch_size,
                folds: a.folds.clone(),
            };
            let run = pool.install(|| run_cross_validation(&m, &samples, backbone.clone(), &opts))?;
            let stem = cv_stem(id.name(), m.task, augment, seed);
            write_text(&dir.join(format!("{stem}.json")), &(run.report.to_json()? + "\n"))?;
            for (fold, model) in run.report.folds.iter().zip(&run.models) {
                let sub = dir.join(&stem);
                ensure_dir(&sub)?;
                write_trial_log(sub.join(format!("trials_fold{}.jsonl", fold.fold)), &fold.trials)?;
                if a.save_models {
                    export_fp32(model)?.write(sub.join(format!("fold{}", fold.fold)))?;
                }
            }
            println!("{stem}: {}", run.report.table_row().join("  "));
        }
    }
    Ok(())
}

fn read_reports(paths: &[PathBuf]) -> Result<Vec<CvReport>> {
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

/// Model and augmentation comparisons for one task and seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsSummary {
    pub task: TaskKind,
    pub seed: u64,
    pub metric: String,
    /// One comparison per augmentation setting with at least two models.
    pub comparisons: Vec<ComparisonReport>,
    pub augmentation: Vec<AugmentationComparison>,
    pub narrative: Vec<String>,
    pub skipped: Vec<String>,
}

/// Group reports by task and seed and run every applicable comparison.
pub fn summarize_statistics(reports: &[CvReport], metric: &str) -> Result<Vec<StatsSummary>> {
    if MetricSet::NAMES.iter().all(|n| *n != metric) {
        return Err(Error::invalid(format!("unknown metric {metric:?}")));
    }
    let mut groups: BTreeMap<(String, u64), Vec<&CvReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.task.to_string(), r.seed)).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((_, seed), group) in groups {
        let task = group[0].task;
        let mut comparisons = Vec::new();
        let mut skipped = Vec::new();
        for aug in [false, true] {
            let set: Vec<CvReport> = group.iter().filter(|r| r.augmentation == aug).map(|r| (*r).clone()).collect();
            let label = if aug { "with augmentation" } else { "without augmentation" };
            match set.len() {
                0 => {}
                1 => skipped.push(format!("{label}: only {} available", set[0].backbone)),
                _ => comparisons.push(compare_cv_reports(&set, metric)?),
            }
        }
        let mut augmentation = Vec::new();
        for plain in group.iter().filter(|r| !r.augmentation) {
            if let Some(aug) = group.iter().find(|r| r.augmentation && r.backbone == plain.backbone) {
                augmentation.push(compare_augmentation_reports(plain, aug, metric)?);
            }
        }
        let mut narrative: Vec<String> = comparisons.iter().flat_map(ComparisonReport::narrative).collect();
        narrative.extend(augmentation.iter().map(|a| {
            format!(
                "{}: augmentation changes {metric} by {:+.1} pp ({}, p = {})",
                a.model,
                a.mean_delta_pp,
                a.branch,
                a.result.p_value.map_or("n/a".into(), |p| format!("{p:.4}"))
            )
        }));
        out.push(StatsSummary {
            task,
            seed,
            metric: metric.to_string(),
            comparisons,
            augmentation,
            narrative,
            skipped,
        });
    }
    Ok(out)
}

fn cmd_stats(cfg: &PipelineConfig, a: &StatsArgs) -> CliResult<()> {
    let paths = if a.reports.is_empty() {
        files_with_ext(&cfg.run_dir().join("cv"), "json")?
    } else {
        for p in &a.reports {
            if !p.is_file() {
                return Err(CliError::Config(format!("--report: {} does not exist", p.display())));
            }
        }
        a.reports.clone()
    };
    let reports = read_reports(&paths)?;
    if reports.len() < 2 {
        return Err(Error::Stats(format!("need at least two reports, found {}", reports.len())).into());
    }
    let summaries = summarize_statistics(&reports, &a.metric)?;
    let dir = cfg.run_dir().join("stats");
    for s in &summaries {
        let stem = format!("{}_seed{}_{}", s.task, s.seed, s.metric);
        write_json(&dir.join(format!("{stem}.json")), s)?;
        write_text(&dir.join(format!("{stem}.txt")), &(s.narrative.join("\n") + "\n"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct XaiEntry {
    input: String,
    stem: String,
    target_class: usize,
    target_label: String,
    predicted_label: String,
    probabilities: Vec<f64>,
    layer: String,
}

fn cmd_xai(cfg: &PipelineConfig, a: &XaiArgs) -> CliResult<()> {
    if a.images.is_empty() && a.ids.is_empty() {
        return Err(CliError::Config("xai needs at least one --image or --id".into()));
    }
    let trained = read_artifact(&a.model)?.load_model()?;
    let model = &trained.model;
    let names = model.task.class_names();
    let mut inputs: Vec<(String, PathBuf)> = a
        .images
        .iter()
        .map(|p| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p.clone()))
        .collect();
    if !a.ids.is_empty() {
        let m = manifest(cfg)?;
        for id in &a.ids {
            let r = m
                .get(id)
                .ok_or_else(|| CliError::Config(format!("--id: no record {id:?} in the manifest")))?;
            inputs.push((id.clone(), m.resolve(r)));
        }
    }
    let (h, w) = model.backbone.input_hw();
    let pre = PreprocessConfig {
        target_height: h as u32,
        target_width: w as u32,
        value_range: ValueRange::Raw,
        crop: a.crop,
    };
    let dir = cfg.run_dir().join("xai");
    let mut index = Vec::new();
    for (stem, path) in inputs {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let tensor = preprocess_image(&bytes, &pre)?;
        let probs = model.predict(&tensor)?;
        let predicted = argmax(&probs);
        let target = a.class.unwrap_or(predicted);
        let cam = grad_cam_at(model, &tensor, target, a.layer.as_deref())?;
        let ov = overlay(&tensor, &cam, a.alpha, a.colormap.into())?;
        export(&dir, &stem, &cam, &ov)?;
        println!("{stem}: {} -> {}_overlay.png", names[predicted], stem);
        index.push(XaiEntry {
            input: path.display().to_string(),
            stem,
            target_class: target,
            target_label: names[target].to_string(),
            predicted_label: names[predicted].to_string(),
            probabilities: probs,
            layer: cam.layer,
        });
    }
    write_json(&dir.join("index.json"), &index)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PrecisionEvaluation {
    fp32: MetricSet,
    fp16: MetricSet,
    /// Fraction of images with the same predicted class.
    agreement: f64,
    images: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantizationSummary {
    pub model: String,
    pub backbone: String,
    pub task: TaskKind,
    pub fp32_bytes: u64,
    pub fp16_bytes: u64,
    pub size_ratio: f64,
    pub fp32_sha256: String,
    pub fp16_sha256: String,
    evaluation: Option<PrecisionEvaluation>,
}

fn cmd_quantize(cfg: &PipelineConfig, a: &QuantizeArgs) -> CliResult<()> {
    let full = read_artifact(&a.model)?;
    if full.precision() != Precision::Fp32 {
        return Err(CliError::Config(format!("--model: {} is already fp16", a.model.display())));
    }
    let trained: TrainedModel = full.load_model()?;
    let half = quantize_fp16(&trained)?;
    let name = dir_name(&a.model);
    let base = cfg.run_dir().join("quantize");
    let out = a.out.clone().unwrap_or_else(|| base.join(format!("{name}-fp16")));
    half.write(&out)?;
    println!("wrote {}", out.display());
    let evaluation = if a.evaluate {
        let m = for_task(&manifest(cfg)?, trained.model.task);
        let (size, _) = trained.model.backbone.input_hw();
        let samples = load_samples(&m, size)?;
        let e32 = evaluate_artifact(&full, &samples)?;
        let e16 = evaluate_artifact(&half, &samples)?;
        let same = e32.predicted.iter().zip(&e16.predicted).filter(|(x, y)| x == y).count();
        Some(PrecisionEvaluation {
            fp32: e32.metrics,
            fp16: e16.metrics,
            agreement: same as f64 / samples.len().max(1) as f64,
            images: samples.len(),
        })
    } else {
        None
    };
    let summary = QuantizationSummary {
        model: name.clone(),
        backbone: trained.model.backbone.name().to_string(),
        task: trained.model.task,
        fp32_bytes: full.byte_size(),
        fp16_bytes: half.byte_size(),
        size_ratio: half.meta.size_ratio.unwrap_or(f64::NAN),
        fp32_sha256: full.meta.blob_sha256.clone(),
        fp16_sha256: half.meta.blob_sha256.clone(),
        evaluation,
    };
    println!(
        "{name}: {} -> {} bytes (ratio {:.3})",
        summary.fp32_bytes, summary.fp16_bytes, summary.size_ratio
    );
    write_json(&base.join(format!("{name}.json")), &summary)?;
    Ok(())
}

fn default_head() -> HeadConfig {
    HeadConfig::new(&[(256, 0.0)], 1e-3).expect("valid head")
}

fn cmd_bench(cfg: &PipelineConfig, a: &BenchArgs) -> CliResult<()> {
    let artifact = match (&a.model, &a.backbone) {
        (Some(dir), _) => read_artifact(dir)?,
        (None, Some(name)) => {
            let bb = Arc::new(load_backbone(cfg, backbone_id(name)?)?);
            let seed = cfg.seeds[0];
            let t = TrainedModel::untrained(build_model(bb, &default_head(), cfg.task, seed)?, seed);
            match a.precision {
                CliPrecision::Fp32 => export_fp32(&t)?,
                CliPrecision::Fp16 => quantize_fp16(&t)?,
            }
        }
        (None, None) => return Err(CliError::Config("bench needs --model or --backbone".into())),
    };
    if a.runs == 0 || a.threads == 0 {
        return Err(CliError::Config("--runs and --threads must be at least 1".into()));
    }
    let mut opts = BenchmarkOptions {
        runs: a.runs,
        warmup: a.warmup,
        threads: a.threads,
        seed: cfg.seeds[0],
        ..BenchmarkOptions::default()
    };
    if let Some(l) = &a.lock {
        opts.lock_path = l.clone();
    }
    let report: BenchmarkReport = benchmark_inference(&artifact, &opts)?;
    let name = format!(
        "{}_{}_{}_t{}",
        report.model,
        report.task,
        if report.quantized { "fp16" } else { "fp32" },
        report.threads
    );
    println!("{name}: {} s over {} runs", report.summary(), report.n_runs);
    write_json(&cfg.run_dir().join("bench").join(format!("{name}.json")), &report)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbeddingPlot {
    backbone: String,
    task: TaskKind,
    class_names: Vec<String>,
    ids: Vec<String>,
    labels: Vec<usize>,
    coordinates: Vec<Vec<f64>>,
    explained_variance_ratio: Vec<f64>,
}

fn cmd_embed(cfg: &PipelineConfig, a: &EmbedArgs) -> CliResult<()> {
    let model = match &a.model {
        Some(dir) => read_artifact(dir)?.load_model()?.model,
        None => {
            let name = a.backbone.as_deref().unwrap_or(&cfg.backbones[0]);
            let bb = Arc::new(load_backbone(cfg, backbone_id(name)?)?);
            build_model(bb, &default_head(), cfg.task, cfg.seeds[0])?
        }
    };
    let m = for_task(&manifest(cfg)?, model.task);
    let (size, _) = model.backbone.input_hw();
    let samples = load_samples(&m, size)?;
    let emb = extract_embeddings(&model, &samples)?;
    let pca = emb.pca(a.dims)?;
    let plot = EmbeddingPlot {
        backbone: emb.backbone.clone(),
        task: model.task,
        class_names: model.task.class_names().into_iter().map(String::from).collect(),
        ids: emb.ids,
        labels: emb.labels,
        coordinates: pca.coordinates,
        explained_variance_ratio: pca.explained_variance_ratio,
    };
    let path = cfg.run_dir().join("embed").join(format!("{}_{}.json", plot.backbone, plot.task));
    write_json(&path, &plot)?;
    Ok(())
}

fn cmd_serve(cfg: &PipelineConfig, a: &ServeArgs) -> CliResult<()> {
    if !a.models.is_dir() {
        return Err(CliError::Config(format!("--models: {} is not a directory", a.models.display())));
    }
    let host = a.host.clone().unwrap_or_else(|| cfg.host.clone());
    let port = a.port.unwrap_or(cfg.port);
    let addr = (host.as_str(), port)
        .to_socket_addrs()
        .ok()
        .and_then(|mut it| it.next())
        .ok_or_else(|| CliError::Config(format!("config field `host`: cannot resolve {host}:{port}")))?;
    let state = AppState::from_dir(&a.models)?;
    let catalog = state.catalog();
    for e in catalog.entries() {
        println!("loaded {} ({}, {:?}, {})", e.id, e.meta.provenance.backbone, e.meta.precision, e.version());
    }
    if catalog.is_empty() {
        eprintln!("warning: no artifacts under {}", a.models.display());
    }
    println!("listening on http://{addr}");
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io(&a.models, e))?;
    rt.block_on(serve(state, addr)).map_err(|e| Error::invalid(format!("server: {e}")))?;
    Ok(())
}

const TABLE_METRICS: [(&str, &str); 4] = [
    ("accuracy", "Accuracy"),
    ("sensitivity", "Sensitivity"),
    ("specificity", "Specificity"),
    ("f1", "F-1 Score"),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricCell {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub augmentation: bool,
    pub seed: u64,
    pub metrics: BTreeMap<String, MetricCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub tables: BTreeMap<String, Vec<SummaryRow>>,
    pub statistics: Vec<StatsSummary>,
    pub quantization: Vec<QuantizationSummary>,
    pub latency: Vec<BenchmarkReport>,
}

fn summary_rows(reports: &[CvReport]) -> BTreeMap<String, Vec<SummaryRow>> {
    let mut tables: BTreeMap<String, Vec<SummaryRow>> = BTreeMap::new();
    for r in reports {
        let metrics = TABLE_METRICS
            .iter()
            .map(|(k, _)| {
                let cell = MetricCell {
                    mean: r.mean.get(k).unwrap_or(0.0),
                    std: r.std.get(k).unwrap_or(0.0),
                };
                (k.to_string(), cell)
            })
            .collect();
        tables.entry(r.task.to_string()).or_default().push(SummaryRow {
            model: r.backbone.clone(),
            augmentation: r.augmentation,
            seed: r.seed,
            metrics,
        });
    }
    for rows in tables.values_mut() {
        rows.sort_by(|a, b| (a.augmentation, &a.model, a.seed).cmp(&(b.augmentation, &b.model, b.seed)));
    }
    tables
}

fn markdown(summary: &RunSummary) -> String {
    let mut s = String::from("# Run summary\n");
    for (task, rows) in &summary.tables {
        s.push_str(&format!("\n## {task} classification\n\n| Model | Augmentation | Seed |"));
        for (_, title) in TABLE_METRICS {
            s.push_str(&format!(" {title} |"));
        }
        s.push_str("\n|---|---|---|");
        s.push_str(&"---|".repeat(TABLE_METRICS.len()));
        s.push('\n');
        for r in rows {
            s.push_str(&format!("| {} | {} | {} |", r.model, if r.augmentation { "yes" } else { "no" }, r.seed));
            for (k, _) in TABLE_METRICS {
                let c = &r.metrics[k];
                s.push_str(&format!(" {:.3} (±{:.3}) |", c.mean, c.std));
            }
            s.push('\n');
        }
    }
    if !summary.statistics.is_empty() {
        s.push_str("\n## Statistical comparison\n\n");
        for st in &summary.statistics {
            s.push_str(&format!("{} task, seed {}, {}:\n\n", st.task, st.seed, st.metric));
            for line in st.narrative.iter().chain(&st.skipped) {
                s.push_str(&format!("- {line}\n"));
            }
            s.push('\n');
        }
    }
    if !summary.quantization.is_empty() {
        s.push_str("\n## Model size\n\n| Model | Task | fp32 bytes | fp16 bytes | Ratio |\n|---|---|---|---|---|\n");
        for q in &summary.quantization {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {:.3} |\n",
                q.backbone, q.task, q.fp32_bytes, q.fp16_bytes, q.size_ratio
            ));
        }
    }
    if !summary.latency.is_empty() {
        s.push_str("\n## Inference time (seconds)\n\n| Task | Model | Quantized | Threads | Mean ± std |\n|---|---|---|---|---|\n");
        for b in &summary.latency {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                b.task,
                b.model,
                if b.quantized { "yes" } else { "no" },
                b.threads,
                b.summary()
            ));
        }
    }
    s
}

fn read_json_dir<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<Vec<T>> {
    files_with_ext(dir, "json")?
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

fn cmd_report(cfg: &PipelineConfig, a: &ReportArgs) -> CliResult<()> {
    let run = cfg.run_dir();
    let reports = read_reports(&files_with_ext(&run.join("cv"), "json")?)?;
    if reports.is_empty() {
        return Err(Error::invalid(format!("no cross-validation reports under {}", run.join("cv").display())).into());
    }
    let out = run.join("report");
    for r in &reports {
        let stem = cv_stem(&r.backbone, r.task, r.augmentation, r.seed);
        for f in &r.folds {
            if !f.trials.is_empty() {
                let data = exploration_plot_data(&f.trials)?;
                write_json(&out.join("exploration").join(format!("{stem}_fold{}.json", f.fold)), &data)?;
            }
        }
    }
    let summary = RunSummary {
        tables: summary_rows(&reports),
        statistics: if reports.len() >= 2 {
            summarize_statistics(&reports, &a.metric)?
        } else {
            Vec::new()
        },
        quantization: read_json_dir(&run.join("quantize"))?,
        latency: read_json_dir(&run.join("bench"))?,
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_text(&out.join("summary.md"), &markdown(&summary))?;
    Ok(())
}
