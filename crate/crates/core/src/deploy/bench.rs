use std::fs::{File, OpenOptions};
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::TaskKind;
use crate::rng::stream;
use crate::tensor::{ImageTensor, ValueRange};

use super::{ModelArtifact, Precision};

pub const DEFAULT_LOCK_NAME: &str = "mpox-screen-bench.lock";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOptions {
    pub runs: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
    /// Held exclusively for the duration of the run.
    pub lock_path: PathBuf,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            runs: 50,
            warmup: 5,
            threads: 4,
            seed: 0,
            lock_path: std::env::temp_dir().join(DEFAULT_LOCK_NAME),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostDescriptor {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub cpu_model: Option<String>,
}

impl HostDescriptor {
    pub fn current() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        });
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub task: TaskKind,
    pub model: String,
    pub precision: Precision,
    pub quantized: bool,
    pub n_runs: usize,
    pub warmup_runs: usize,
    pub threads: usize,
    pub input_spec: String,
    /// Seconds per timed inference, in run order.
    pub timings: Vec<f64>,
    pub mean_seconds: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_seconds: f64,
    pub degenerate: bool,
    /// Wall time of the whole timed loop.
    pub total_seconds: f64,
    pub host: HostDescriptor,
}

impl BenchmarkReport {
    /// `mean ± std` in seconds, as in a latency table cell.
    pub fn summary(&self) -> String {
        format!("{:.4} ± {:.4}", self.mean_seconds, self.std_seconds)
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn acquire(path: &PathBuf) -> Result<File> {
    let f = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.lock().map_err(|e| Error::io(path, e))?;
    Ok(f)
}

/// Time single-image inferences on a synthetic input.
///
/// Runs `warmup` untimed inferences, then `runs` timed ones, inside a pool
/// of `threads` workers. Only one benchmark per lock file runs at a time.
pub fn benchmark_inference(artifact: &ModelArtifact, opts: &BenchmarkOptions) -> Result<BenchmarkReport> {
    if opts.runs == 0 || opts.threads == 0 {
        return Err(Error::invalid("runs and threads must be at least 1"));
    }
    let trained = artifact.load_model()?;
    let model = &trained.model;
    let (h, w) = model.backbone.input_hw();
    let mut rng = stream(opts.seed, &[0xBE7C]);
    let data: Vec<f32> = (0..h * w * 3).map(|_| f32::from(rng.random::<u8>())).collect();
    let input = ImageTensor::new(h, w, data, ValueRange::Raw)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let lock = acquire(&opts.lock_path)?;
    let timed = pool.install(|| -> Result<(Vec<f64>, f64)> {
        for _ in 0..opts.warmup {
            model.predict(&input)?;
        }
        let mut timings = Vec::with_capacity(opts.runs);
        let start = Instant::now();
        for _ in 0..opts.runs {
            let t = Instant::now();
            model.predict(&input)?;
            timings.push(t.elapsed().as_secs_f64());
        }
        Ok((timings, start.elapsed().as_secs_f64()))
    });
    drop(lock);
    let (timings, total_seconds) = timed?;
    let (mean_seconds, std_seconds) = mean_std(&timings);
    Ok(BenchmarkReport {
        task: model.task,
        model: model.backbone.name().to_string(),
        precision: artifact.precision(),
        quantized: artifact.precision() == Precision::Fp16,
        n_runs: opts.runs,
        warmup_runs: opts.warmup,
        threads: opts.threads,
        input_spec: format!("{h}x{w}x3 synthetic uniform 0..255, seed {}", opts.seed),
        timings,
        mean_seconds,
        std_seconds,
        degenerate: opts.runs == 1,
        total_seconds,
        host: HostDescriptor::current(),
    })
}
