//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 3 and 4 need the MCSI images and pretrained backbones
//! (`MPOX_MCSI_MANIFEST`, `MPOX_BACKBONE_DIR`); without them they report
//! FAIL with a `blocked` reason. The process exits 0 unless
//! `ACCEPTANCE_STRICT=1`, in which case any FAIL makes it exit 1.
//! Positional arguments restrict the run to the listed criterion numbers.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use mpox_screen::data::{
    load_manifest, make_stratified_folds, relabel_binary, scan_image_folder, DatasetManifest, DevRole, ImageRecord,
};
use mpox_screen::deploy::{benchmark_inference, evaluate_artifact, export_fp32, quantize_fp16, BenchmarkOptions};
use mpox_screen::eval::{compute_metrics, confusion, load_samples, run_cross_validation, CvOptions, MetricSet};
use mpox_screen::hpo::{hyperband_schedule, run_hyperband, sample_config, HyperbandConfig, SearchSpace, TrialConfig};
use mpox_screen::labels::{ClassLabel, TaskKind};
use mpox_screen::model::{build_model, pca_project, Dense, Head, HeadConfig, Model, Sample, TrainedModel};
use mpox_screen::nn::spec::GRAPH_FORMAT;
use mpox_screen::nn::{
    Activation, Backbone, BackboneId, BackboneSource, Graph, GraphSpec, NodeSpec, Op, Padding, BACKBONE_DIR_ENV,
};
use mpox_screen::stats::{
    anova_rm, bartlett, compare_models, shapiro_wilk, t_test_independent, tukey_hsd, wilcoxon_rank_sum, SampleVector,
};
use mpox_screen::tensor::{ImageTensor, ValueRange};
use mpox_screen::xai::grad_cam;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;
use statrs::distribution::{Binomial, DiscreteCDF};

const MCSI_ENV: &str = "MPOX_MCSI_MANIFEST";

struct Outcome {
    pass: bool,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome {
        pass: true,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        pass: false,
        detail: detail.into(),
    }
}

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass: ok,
        detail: detail.into(),
    }
}

/// Collects failed sub-checks so one line can report all of them.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    count: usize,
}

impl Checks {
    fn expect(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.count += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    fn outcome(self, summary: impl Into<String>) -> Outcome {
        let summary = summary.into();
        if self.failures.is_empty() {
            pass(format!("{summary} ({} checks)", self.count))
        } else {
            let shown: Vec<_> = self.failures.iter().take(3).cloned().collect();
            fail(format!("{summary}; {} of {} checks failed: {}", self.failures.len(), self.count, shown.join("; ")))
        }
    }
}

// ---------------------------------------------------------------------------
// 1. folds

fn mcsi_manifest() -> Option<DatasetManifest> {
    let path = PathBuf::from(std::env::var_os(MCSI_ENV)?);
    let m = if path.is_dir() { scan_image_folder(&path, "MCSI") } else { load_manifest(&path) };
    Some(m.unwrap_or_else(|e| panic!("{MCSI_ENV}={}: {e}", path.display())))
}

fn pretrained() -> Option<BackboneSource> {
    BackboneSource::from_env()
}

/// 100 records per class with placeholder paths; fold assignment never
/// touches the files.
fn synthetic_manifest(per_class: usize) -> DatasetManifest {
    let mut records = Vec::new();
    for label in ClassLabel::ALL {
        for i in 0..per_class {
            let mut hash = [0u8; 32];
            hash[0] = label.code() as u8;
            hash[1..9].copy_from_slice(&(i as u64).to_le_bytes());
            records.push(ImageRecord {
                id: format!("{}_{i:03}", label.name().to_lowercase()),
                path: PathBuf::from(format!("{}/{i}.jpg", label.name())),
                label,
                source: "synthetic".into(),
                content_hash: hash,
            });
        }
    }
    DatasetManifest::new(records, "/nonexistent").unwrap()
}

fn ac1_folds() -> Outcome {
    let (manifest, origin) = match mcsi_manifest() {
        Some(m) => (m, "MCSI manifest"),
        None => (synthetic_manifest(100), "synthetic 4x100 manifest (MCSI not configured)"),
    };
    let label_of: BTreeMap<&str, ClassLabel> = manifest.records.iter().map(|r| (r.id.as_str(), r.label)).collect();
    let mut c = Checks::default();
    let k = 10;
    for seed in [42u64, 7, 2024] {
        let plan = make_stratified_folds(&manifest, k, seed).unwrap();
        let again = make_stratified_folds(&manifest, k, seed).unwrap();
        c.expect(plan == again, || format!("seed {seed}: plan not deterministic"));
        c.expect(plan.to_json() == again.to_json(), || format!("seed {seed}: serialization differs"));

        let mut seen = BTreeMap::new();
        for fold in 0..k {
            let test = plan.test_ids(fold);
            c.expect(test.len() == 40, || format!("seed {seed} fold {fold}: {} records", test.len()));
            for label in ClassLabel::ALL {
                let n = test.iter().filter(|id| label_of[id.as_str()] == label).count();
                c.expect(n == 10, || format!("seed {seed} fold {fold}: {n} {label}"));
            }
            for id in &test {
                *seen.entry(id.clone()).or_insert(0) += 1;
            }

            let roles = &plan.dev_split[&fold];
            let dev: Vec<&String> = roles.keys().collect();
            c.expect(dev.len() == manifest.len() - test.len(), || format!("fold {fold}: dev size {}", dev.len()));
            c.expect(dev.iter().all(|id| plan.assignment[*id] != fold), || format!("fold {fold}: dev overlaps test"));
            let val = plan.val_ids(fold);
            c.expect(4 * val.len() == dev.len(), || format!("fold {fold}: {} of {} in validation", val.len(), dev.len()));
            for label in ClassLabel::ALL {
                let dev_c = dev.iter().filter(|id| label_of[id.as_str()] == label).count() as f64;
                let val_c = roles
                    .iter()
                    .filter(|(id, r)| **r == DevRole::Val && label_of[id.as_str()] == label)
                    .count() as f64;
                c.expect((val_c - dev_c / 4.0).abs() < 1.0, || {
                    format!("fold {fold}: {label} validation {val_c} of {dev_c}")
                });
            }
        }
        c.expect(seen.len() == manifest.len() && seen.values().all(|n| *n == 1), || {
            format!("seed {seed}: folds not disjoint/exhaustive")
        });
    }
    let other = make_stratified_folds(&manifest, k, 43).unwrap();
    c.expect(other.assignment != make_stratified_folds(&manifest, k, 42).unwrap().assignment, || {
        "seeds 42 and 43 gave the same assignment".into()
    });
    c.outcome(format!("{origin}: 10 folds x 40 x 10/class, disjoint, 75/25 dev split, deterministic"))
}

// ---------------------------------------------------------------------------
// 2. metrics

/// Metrics counted straight from label vectors.
fn counting_oracle(truth: &[usize], pred: &[usize], task: TaskKind) -> [f64; 5] {
    let n = truth.len() as f64;
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64;
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let per_class = |c: usize| {
        let count = |f: &dyn Fn(usize, usize) -> bool| truth.iter().zip(pred).filter(|(t, p)| f(**t, **p)).count() as f64;
        let tp = count(&|t, p| t == c && p == c);
        let fneg = count(&|t, p| t == c && p != c);
        let fp = count(&|t, p| t != c && p == c);
        let tn = count(&|t, p| t != c && p != c);
        let sens = div(tp, tp + fneg);
        let prec = div(tp, tp + fp);
        [sens, div(tn, tn + fp), prec, div(2.0 * prec * sens, prec + sens)]
    };
    let classes: Vec<usize> = match task {
        TaskKind::Binary => vec![0],
        TaskKind::Multiclass => (0..4).collect(),
    };
    let mut avg = [0.0; 4];
    for &c in &classes {
        for (a, v) in avg.iter_mut().zip(per_class(c)) {
            *a += v / classes.len() as f64;
        }
    }
    [correct / n, avg[0], avg[1], avg[2], avg[3]]
}

fn ac2_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut c = Checks::default();
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let task = if i % 2 == 0 { TaskKind::Binary } else { TaskKind::Multiclass };
        let k = task.n_classes();
        let n = rng.random_range(1..=120);
        // skewed draws so empty rows and columns occur
        let bias = rng.random_range(0..k);
        let draw = |rng: &mut ChaCha8Rng| if rng.random_bool(0.3) { bias } else { rng.random_range(0..k) };
        let truth: Vec<usize> = (0..n).map(|_| draw(&mut rng)).collect();
        let pred: Vec<usize> = (0..n).map(|_| draw(&mut rng)).collect();
        let cm = confusion(&truth, &pred, k).unwrap();
        let got = compute_metrics(&cm, task).unwrap();
        let want = counting_oracle(&truth, &pred, task);
        for (name, w) in MetricSet::NAMES.iter().zip(want) {
            let g = got.get(name).unwrap();
            worst = worst.max((g - w).abs());
            c.expect((g - w).abs() <= 1e-12, || format!("matrix {i} {name}: {g} vs {w}"));
        }
    }
    c.outcome(format!("1000 matrices, max |diff| {worst:.1e} (tol 1e-12)"))
}

// ---------------------------------------------------------------------------
// 3, 4. reproduction bands

fn reproduction(task: TaskKind, backbone: BackboneId, threshold: f64) -> Outcome {
    let (Some(manifest), Some(source)) = (mcsi_manifest(), pretrained()) else {
        return fail(format!(
            "blocked: set {MCSI_ENV} and {BACKBONE_DIR_ENV} to run the {backbone:?} 10-fold CV (mean accuracy >= {threshold})"
        ));
    };
    let manifest = match task {
        TaskKind::Binary => relabel_binary(&manifest),
        TaskKind::Multiclass => manifest,
    };
    let bb = Arc::new(Backbone::load(backbone, &source).unwrap());
    let samples = load_samples(&manifest, bb.input_hw().0).unwrap();
    let opts = CvOptions {
        k: 10,
        seed: 42,
        augment: false,
        hyperband: HyperbandConfig {
            max_resource: 27,
            eta: 3,
            seed: 0,
        },
        ..CvOptions::default()
    };
    let run = run_cross_validation(&manifest, &samples, bb, &opts).unwrap();
    let r = &run.report;
    check(
        r.mean.accuracy >= threshold,
        format!(
            "{} {:?}: mean accuracy {:.3} (±{:.3}), band >= {threshold}",
            r.backbone, task, r.mean.accuracy, r.std.accuracy
        ),
    )
}

fn ac3_binary() -> Outcome {
    reproduction(TaskKind::Binary, BackboneId::MobileNetV3Small, 0.85)
}

fn ac4_multiclass() -> Outcome {
    reproduction(TaskKind::Multiclass, BackboneId::MobileNetV3Large, 0.80)
}

// ---------------------------------------------------------------------------
// 5, 6. quantization

fn ac5_size_ratio() -> Outcome {
    let source = pretrained().unwrap_or(BackboneSource::Random { seed: 5 });
    let mut parts = Vec::new();
    let mut ok = true;
    for id in BackboneId::ALL {
        let bb = Arc::new(Backbone::load(id, &source).unwrap());
        let cfg = HeadConfig::new(&[(256, 0.2)], 1e-3).unwrap();
        let model = TrainedModel::untrained(build_model(bb, &cfg, TaskKind::Multiclass, 1).unwrap(), 1);
        let full = export_fp32(&model).unwrap().byte_size() as f64;
        let half = quantize_fp16(&model).unwrap().byte_size() as f64;
        let ratio = full / half;
        ok &= (3.5..=4.5).contains(&ratio);
        parts.push(format!("{} {:.2}->{:.2} MB x{ratio:.3}", id.name(), full / 1e6, half / 1e6));
    }
    check(ok, format!("fp32/fp16 artifact bytes in [3.5, 4.5]: {}", parts.join(", ")))
}

/// Tinted noisy images; class `c` has its own base colour.
fn synthetic_samples(per_class: usize, size: usize, seed: u64) -> (DatasetManifest, Vec<Sample>) {
    let manifest = synthetic_manifest(per_class);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tints = [[170.0, 80.0, 80.0], [80.0, 160.0, 90.0], [90.0, 90.0, 170.0], [150.0, 140.0, 90.0]];
    let samples = manifest
        .records
        .iter()
        .map(|r| {
            let tint = tints[r.label.code()];
            let data = (0..size * size * 3)
                .map(|i| (tint[i % 3] + rng.random_range(-70.0..70.0f32)).clamp(0.0, 255.0))
                .collect();
            Sample {
                id: r.id.clone(),
                image: Arc::new(ImageTensor::new(size, size, data, ValueRange::Raw).unwrap()),
                label: manifest.target(r),
            }
        })
        .collect();
    (manifest, samples)
}

fn ac6_quantized_accuracy() -> Outcome {
    let real = mcsi_manifest().zip(pretrained());
    let (manifest, samples, source, size, k, label) = match real {
        Some((m, src)) => {
            let s = load_samples(&m, 224).unwrap();
            (m, s, src, 224, 10, "MCSI, pretrained")
        }
        None => {
            let (m, s) = synthetic_samples(40, 64, 6);
            (m, s, BackboneSource::Random { seed: 6 }, 64, 5, "synthetic stand-in (MCSI not configured), random backbones")
        }
    };
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for id in [BackboneId::MobileNetV3Small, BackboneId::MobileNetV3Large] {
        let bb = Arc::new(Backbone::load_at(id, &source, size).unwrap());
        let opts = CvOptions {
            k,
            seed: 42,
            hyperband: HyperbandConfig {
                max_resource: 3,
                eta: 3,
                seed: 0,
            },
            retrain_epochs: 15,
            patience: None,
            batch_size: 16,
            ..CvOptions::default()
        };
        let run = run_cross_validation(&manifest, &samples, bb, &opts).unwrap();
        let mut deltas = Vec::new();
        for (fold, model) in run.report.folds.iter().zip(&run.models) {
            let test: Vec<Sample> = run.plan.test_ids(fold.fold).iter().map(|i| by_id[i.as_str()].clone()).collect();
            let full = evaluate_artifact(&export_fp32(model).unwrap(), &test).unwrap().metrics.accuracy;
            let half = evaluate_artifact(&quantize_fp16(model).unwrap(), &test).unwrap().metrics.accuracy;
            deltas.push(full - half);
        }
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let worst = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ok &= mean.abs() <= 0.02;
        parts.push(format!(
            "{} acc {:.3}, mean delta {mean:+.4} (worst fold {worst:+.4})",
            id.name(),
            run.report.mean.accuracy
        ));
    }
    check(ok, format!("{label}, {k}-fold: {}", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 7. Grad-CAM

fn node(name: &str, inputs: &[&str], op: Op, params: &[(&str, &[usize])]) -> NodeSpec {
    NodeSpec {
        name: name.into(),
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
        op,
        params: params.iter().map(|(n, s)| (n.to_string(), s.to_vec())).collect(),
    }
}

fn conv(kernel: usize, filters: usize, use_bias: bool, activation: Activation) -> Op {
    Op::Conv2d {
        kernel: [kernel, kernel],
        strides: [1, 1],
        padding: Padding::Valid,
        dilation: [1, 1],
        filters,
        use_bias,
        activation,
    }
}

fn graph_spec(nodes: Vec<NodeSpec>, output: &str, size: usize) -> GraphSpec {
    let mut all = vec![node(
        "input",
        &[],
        Op::Input {
            height: size,
            width: size,
            channels: 3,
        },
        &[],
    )];
    all.extend(nodes);
    GraphSpec {
        format: GRAPH_FORMAT.into(),
        name: "synthetic".into(),
        output: output.into(),
        nodes: all,
    }
}

/// Hidden unit `j < f` copies feature `j`; class `c` reads unit
/// `class_features[c]` with weight `scale[c]`.
fn routing_head(f: usize, class_features: &[usize], scale: &[f32]) -> Head {
    let units = 256;
    let mut w1 = vec![0.0; f * units];
    for j in 0..f {
        w1[j * units + j] = 1.0;
    }
    let k = class_features.len();
    let mut w2 = vec![0.0; units * k];
    for (c, &feat) in class_features.iter().enumerate() {
        w2[feat * k + c] = scale[c];
    }
    let layers = vec![
        Dense {
            inputs: f,
            outputs: units,
            weight: w1,
            bias: vec![0.0; units],
        },
        Dense {
            inputs: units,
            outputs: k,
            weight: w2,
            bias: vec![0.0; k],
        },
    ];
    Head::from_layers(HeadConfig::new(&[(units, 0.0)], 1e-4).unwrap(), layers).unwrap()
}

fn synthetic_model(graph: Graph, head: Head) -> Model {
    Model {
        backbone: Arc::new(Backbone::from_graph(graph, ValueRange::Raw)),
        head,
        task: TaskKind::Binary,
    }
}

fn ac7_grad_cam() -> Outcome {
    let mut c = Checks::default();

    // 2x2 single-output conv over the red channel of a 3x3 image: 4 weights
    let k = [0.5f32, -0.25, 1.0, 0.75];
    let mut kernel = vec![0.0; 12];
    for (i, v) in k.iter().enumerate() {
        kernel[i * 3] = *v;
    }
    let spec = graph_spec(
        vec![node("conv", &["input"], conv(2, 1, false, Activation::Linear), &[("kernel", &[2, 2, 3, 1])])],
        "conv",
        3,
    );
    let v = [0.3f32, -0.7];
    let m = synthetic_model(Graph::new(spec, vec![kernel], None).unwrap(), routing_head(1, &[0, 0], &v));
    let red: Vec<f32> = (0..9).map(|i| 10.0 + 3.0 * i as f32 + if i == 4 { 20.0 } else { 0.0 }).collect();
    let img = ImageTensor::new(3, 3, red.iter().flat_map(|r| [*r, 99.0, -40.0]).collect(), ValueRange::Raw).unwrap();
    let act: Vec<f64> = (0..4)
        .map(|pq| {
            let (p, q) = (pq / 2, pq % 2);
            (0..4).map(|ab| f64::from(k[ab]) * f64::from(red[(p + ab / 2) * 3 + q + ab % 2])).sum()
        })
        .collect();
    let mut worst = 0.0f64;
    for (class, vc) in v.iter().enumerate() {
        let r = grad_cam(&m, &img, class).unwrap();
        // logit = v_c * mean(A): each of the 4 positions has gradient v_c / 4
        let alpha = f64::from(*vc) / 4.0;
        let e = (f64::from(r.channel_weights[0]) - alpha).abs();
        worst = worst.max(e);
        c.expect(e < 1e-6, || format!("class {class}: weight {} vs {alpha}", r.channel_weights[0]));
        for (got, a) in r.raw_map.iter().zip(&act) {
            let want = (alpha * a).max(0.0);
            let e = (f64::from(*got) - want).abs() / want.abs().max(1.0);
            worst = worst.max(e);
            c.expect(e < 1e-6, || format!("class {class}: map {got} vs {want}"));
        }
    }

    // red and green detectors; feature c drives class c
    let colour = |scale: [f32; 2]| {
        let spec = graph_spec(
            vec![node(
                "detect",
                &["input"],
                conv(1, 2, true, Activation::Relu),
                &[("kernel", &[1, 1, 3, 2]), ("bias", &[2])],
            )],
            "detect",
            16,
        );
        let s = 1.0 / 255.0;
        let graph = Graph::new(spec, vec![vec![s, 0.0, 0.0, s, 0.0, 0.0], vec![-0.5, -0.5]], None).unwrap();
        synthetic_model(graph, routing_head(2, &[0, 1], &scale))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let random_image = |rng: &mut ChaCha8Rng| {
        let data = (0..16 * 16 * 3).map(|_| f32::from(rng.random::<u8>())).collect();
        ImageTensor::new(16, 16, data, ValueRange::Raw).unwrap()
    };

    let silent = colour([0.0, 1.0]);
    for _ in 0..10 {
        let r = grad_cam(&silent, &random_image(&mut rng), 0).unwrap();
        c.expect(r.heatmap.iter().all(|v| *v == 0.0), || "zero gradient gave a non-zero heatmap".into());
    }

    let live = colour([1.0, -0.5]);
    for i in 0..100 {
        let img = random_image(&mut rng);
        let r = grad_cam(&live, &img, i % 2).unwrap();
        c.expect((r.height, r.width) == (16, 16) && r.heatmap.len() == 256, || format!("input {i}: shape"));
        c.expect(r.heatmap.iter().all(|v| (0.0..=1.0).contains(v)), || format!("input {i}: outside [0, 1]"));
        let constant = r.raw_map.iter().all(|v| *v == r.raw_map[0]);
        let max = r.heatmap.iter().cloned().fold(0.0f32, f32::max);
        let min = r.heatmap.iter().cloned().fold(1.0f32, f32::min);
        if constant {
            c.expect(max == 0.0, || format!("input {i}: constant map not zeroed"));
        } else {
            c.expect((max - 1.0).abs() < 1e-6 && min.abs() < 1e-6, || format!("input {i}: range {min}..{max}"));
        }
    }
    c.outcome(format!("hand gradient max err {worst:.1e} (tol 1e-6), zero-gradient and 100 random-input contracts"))
}

// ---------------------------------------------------------------------------
// 8. statistics

fn fixture() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/stats_reference.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn sv(label: &str, values: Vec<f64>) -> SampleVector {
    SampleVector::new(label, values).unwrap()
}

fn groups(v: &Value) -> Vec<SampleVector> {
    v.as_array().unwrap().iter().enumerate().map(|(i, g)| sv(&format!("m{i}"), floats(g))).collect()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn midranks(all: &[f64]) -> Vec<f64> {
    all.iter()
        .map(|v| {
            let less = all.iter().filter(|w| *w < v).count() as f64;
            let eq = all.iter().filter(|w| *w == v).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect()
}

/// Two-sided exact rank-sum p-value by enumerating every split.
fn enumerated_p(x: &[f64], y: &[f64]) -> f64 {
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = midranks(&all);
    let (n, nx) = (all.len(), x.len());
    let centre = nx as f64 * (n as f64 + 1.0) / 2.0;
    let observed = (ranks[..nx].iter().sum::<f64>() - centre).abs();
    let (mut total, mut extreme) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != nx {
            continue;
        }
        total += 1;
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (s - centre).abs() >= observed - 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / total as f64
}

fn ac8_statistics() -> Outcome {
    let f = fixture();
    let mut c = Checks::default();
    let cases = |key: &str| f[key].as_array().unwrap().clone();

    for (i, t) in cases("shapiro").iter().enumerate() {
        let r = shapiro_wilk(&sv("x", floats(&t["x"]))).unwrap();
        let (w, p) = (t["w"].as_f64().unwrap(), t["p"].as_f64().unwrap());
        c.expect((r.statistic - w).abs() < 1e-3 && (r.p_value.unwrap() - p).abs() < 1e-3, || {
            format!("shapiro {i}: {} {:?} vs {w} {p}", r.statistic, r.p_value)
        });
    }
    for (i, t) in cases("anova_rm").iter().enumerate() {
        let r = anova_rm(&groups(&t["groups"])).unwrap();
        let (fv, p) = (t["f"].as_f64().unwrap(), t["p"].as_f64().unwrap());
        c.expect(rel_close(r.statistic, fv, 1e-6) && (r.p_value.unwrap() - p).abs() < 1e-6, || {
            format!("anova {i}: {} {:?} vs {fv} {p}", r.statistic, r.p_value)
        });
    }
    for (i, t) in cases("tukey").iter().enumerate() {
        let r = tukey_hsd(&groups(&t["groups"])).unwrap();
        let pairs = t["pairs"].as_array().unwrap();
        c.expect(r.len() == pairs.len(), || format!("tukey {i}: pair count"));
        for (got, want) in r.iter().zip(pairs) {
            let (q, p) = (want["q"].as_f64().unwrap(), want["p"].as_f64().unwrap());
            c.expect(rel_close(got.statistic, q, 1e-6) && (got.p_value.unwrap() - p).abs() < 1e-3, || {
                format!("tukey {i}: {} {:?} vs {q} {p}", got.statistic, got.p_value)
            });
        }
    }
    let two_sample = |c: &mut Checks, key: &str, run: &dyn Fn(&SampleVector, &SampleVector) -> mpox_screen::stats::TestResult| {
        for (i, t) in cases(key).iter().enumerate() {
            let r = run(&sv("x", floats(&t["x"])), &sv("y", floats(&t["y"])));
            let (s, p) = (t["statistic"].as_f64().unwrap(), t["p"].as_f64().unwrap());
            c.expect(rel_close(r.statistic, s, 1e-6) && (r.p_value.unwrap() - p).abs() < 1e-6, || {
                format!("{key} {i}: {} {:?} vs {s} {p}", r.statistic, r.p_value)
            });
            if let Some(df) = t.get("df") {
                c.expect(rel_close(r.df[0], df.as_f64().unwrap(), 1e-6), || format!("{key} {i}: df"));
            }
        }
    };
    two_sample(&mut c, "bartlett", &|x, y| bartlett(x, y).unwrap());
    two_sample(&mut c, "t_pooled", &|x, y| t_test_independent(x, y, true).unwrap());
    two_sample(&mut c, "t_welch", &|x, y| t_test_independent(x, y, false).unwrap());
    for (i, t) in cases("wilcoxon_normal").iter().enumerate() {
        let (x, y) = (sv("x", floats(&t["x"])), sv("y", floats(&t["y"])));
        let r = wilcoxon_rank_sum(&x, &y).unwrap();
        let nx = x.len() as f64;
        let u = r.statistic - nx * (nx + 1.0) / 2.0;
        let p = t["p"].as_f64().unwrap();
        c.expect((u - t["u"].as_f64().unwrap()).abs() < 1e-6 && (r.p_value.unwrap() - p).abs() < 1e-6, || {
            format!("wilcoxon normal {i}: U {u} p {:?} vs {p}", r.p_value)
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pairs = 0;
    for n in 2..=12usize {
        for nx in 1..n {
            pairs += 1;
            for rep in 0..3 {
                // coarse grid so ties are common
                let draw = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> {
                    (0..k).map(|_| f64::from(rng.random_range(0..6u8)) / 5.0).collect()
                };
                let (x, y) = (draw(&mut rng, nx), draw(&mut rng, n - nx));
                let got = wilcoxon_rank_sum(&sv("x", x.clone()), &sv("y", y.clone())).unwrap().p_value.unwrap();
                let want = enumerated_p(&x, &y);
                c.expect((got - want).abs() < 1e-12, || format!("exact nx={nx} ny={} rep {rep}: {got} vs {want}", n - nx));
            }
        }
    }
    c.outcome(format!("20 reference datasets per test, exact rank-sum on all {pairs} size pairs with n <= 12"))
}

// ---------------------------------------------------------------------------
// 9. Hyperband

fn ac9_hyperband() -> Outcome {
    let mut c = Checks::default();
    let expected: [(usize, Vec<Vec<(usize, usize)>>); 3] = [
        (9, vec![vec![(9, 1), (3, 3), (1, 9)], vec![(5, 3), (1, 9)], vec![(3, 9)]]),
        (
            27,
            vec![
                vec![(27, 1), (9, 3), (3, 9), (1, 27)],
                vec![(12, 3), (4, 9), (1, 27)],
                vec![(6, 9), (2, 27)],
                vec![(4, 27)],
            ],
        ),
        (
            81,
            vec![
                vec![(81, 1), (27, 3), (9, 9), (3, 27), (1, 81)],
                vec![(34, 3), (11, 9), (3, 27), (1, 81)],
                vec![(15, 9), (5, 27), (1, 81)],
                vec![(8, 27), (2, 81)],
                vec![(5, 81)],
            ],
        ),
    ];
    for (r, want) in &expected {
        let got: Vec<Vec<(usize, usize)>> = hyperband_schedule(*r, 3)
            .unwrap()
            .iter()
            .map(|b| b.rungs.iter().map(|g| (g.n, g.r)).collect())
            .collect();
        c.expect(&got == want, || format!("R={r}: {got:?}"));
    }

    // deterministic toy objective peaking at lr 1e-3, dropout 0.25, 2 layers of 512
    let quality = |t: &TrialConfig| -> f64 {
        let h = &t.head;
        let lr = (h.learning_rate.log10() + 3.0).powi(2);
        let layers = (h.n_layers as f64 - 2.0).abs();
        let (units, drop): (f64, f64) = (0..h.n_layers)
            .map(|i| (((h.dense_units[i] as f64).log2() - 9.0).abs(), (h.dropout[i] - 0.25).abs()))
            .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        let n = h.n_layers as f64;
        (-(lr + 0.5 * layers + 0.3 * units / n + 2.0 * drop / n)).exp()
    };
    let objective =
        |t: &TrialConfig, r: usize, _seed: u64| -> mpox_screen::error::Result<f64> { Ok(quality(t) * (1.0 - 0.5 * (-(r as f64) / 10.0).exp())) };
    let space = SearchSpace::new(false);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut baseline: Vec<f64> = (0..10_000).map(|_| quality(&sample_config(&space, &mut rng))).collect();
    baseline.sort_by(f64::total_cmp);
    let p95 = baseline[9_500];
    let hb = HyperbandConfig {
        max_resource: 81,
        eta: 3,
        seed: 9,
    };
    let result = run_hyperband(&space, &objective, &hb).unwrap();
    let q = quality(&result.best.config);
    let rank = baseline.iter().filter(|b| **b > q).count();
    c.expect(q >= p95, || format!("returned quality {q:.4} below 95th percentile {p95:.4}"));
    c.outcome(format!(
        "schedules for R=9, 27, 81 (eta 3); toy search quality {q:.4} beats {:.2}% of 10000 random configs",
        100.0 * (10_000 - rank) as f64 / 10_000.0
    ))
}

// ---------------------------------------------------------------------------
// 10. benchmark

fn ac10_benchmark() -> Outcome {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(4);
    let lock = tempfile::NamedTempFile::new().unwrap();
    let mut c = Checks::default();
    let mut parts = Vec::new();
    for id in [BackboneId::MobileNetV3Small, BackboneId::MobileNetV3Large] {
        let source = pretrained().unwrap_or(BackboneSource::Random { seed: 10 });
        let bb = Arc::new(Backbone::load(id, &source).unwrap());
        let cfg = HeadConfig::new(&[(512, 0.2)], 1e-3).unwrap();
        let model = TrainedModel::untrained(build_model(bb, &cfg, TaskKind::Multiclass, 10).unwrap(), 10);
        let artifact = quantize_fp16(&model).unwrap();
        let opts = BenchmarkOptions {
            runs: 50,
            warmup: 5,
            threads,
            seed: 10,
            lock_path: lock.path().to_path_buf(),
        };
        let r = benchmark_inference(&artifact, &opts).unwrap();
        c.expect(r.timings.len() == 50 && r.n_runs == 50 && r.warmup_runs == 5, || {
            format!("{}: {} timings", id.name(), r.timings.len())
        });
        let n = r.timings.len() as f64;
        let mean = r.timings.iter().sum::<f64>() / n;
        let std = (r.timings.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        c.expect((mean - r.mean_seconds).abs() <= 1e-12 * mean.max(1.0), || format!("{}: mean not recomputable", id.name()));
        c.expect((std - r.std_seconds).abs() <= 1e-12 * std.max(1.0), || format!("{}: std not recomputable", id.name()));
        c.expect(r.mean_seconds < 1.0, || format!("{}: mean {:.3}s", id.name(), r.mean_seconds));
        parts.push(format!("{} fp16 {}s", id.name(), r.summary()));
    }
    c.outcome(format!("{threads} thread(s), 224x224: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 11. PCA

/// Cyclic Jacobi rotations on a symmetric matrix; eigenpairs sorted by
/// descending eigenvalue.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> Vec<(f64, Vec<f64>)> {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = cs * akp - sn * akq;
                    a[k][q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = cs * apk - sn * aqk;
                    a[q][k] = sn * apk + cs * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = cs * vp - sn * vq;
                    row[q] = sn * vp + cs * vq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n).map(|j| (a[j][j], v.iter().map(|row| row[j]).collect())).collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    pairs
}

fn ac11_pca() -> Outcome {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let nd = Normal::new(0.0, 1.0).unwrap();

    // 200 points in a 3-D subspace of R^12
    let basis: Vec<Vec<f64>> = (0..3).map(|_| (0..12).map(|_| nd.sample(&mut rng)).collect()).collect();
    let offset: Vec<f64> = (0..12).map(|_| 5.0 * nd.sample(&mut rng)).collect();
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|_| {
            let z = [3.0 * nd.sample(&mut rng), 2.0 * nd.sample(&mut rng), nd.sample(&mut rng)];
            (0..12).map(|j| offset[j] + (0..3).map(|k| z[k] * basis[k][j]).sum::<f64>()).collect()
        })
        .collect();
    let p = pca_project(&rows, 3).unwrap();
    let sum: f64 = p.explained_variance_ratio.iter().sum();
    c.expect((sum - 1.0).abs() <= 1e-9, || format!("explained variance sums to {sum}"));

    // small matrix against the Jacobi oracle
    let small: Vec<Vec<f64>> = (0..9).map(|_| (0..4).map(|_| nd.sample(&mut rng)).collect()).collect();
    let dims = 2;
    let got = pca_project(&small, dims).unwrap();
    let n = small.len() as f64;
    let mean: Vec<f64> = (0..4).map(|j| small.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let centred: Vec<Vec<f64>> = small.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let cov: Vec<Vec<f64>> = (0..4)
        .map(|a| (0..4).map(|b| centred.iter().map(|r| r[a] * r[b]).sum::<f64>() / (n - 1.0)).collect())
        .collect();
    let eig = jacobi_eigen(cov);
    let total: f64 = eig.iter().map(|e| e.0.max(0.0)).sum();
    let mut worst = 0.0f64;
    for (k, (value, axis)) in eig.iter().take(dims).enumerate() {
        let pivot = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let axis: Vec<f64> = axis.iter().map(|v| v * pivot.signum()).collect();
        let ratio = value / total;
        worst = worst.max((ratio - got.explained_variance_ratio[k]).abs());
        for (a, b) in axis.iter().zip(&got.components[k]) {
            worst = worst.max((a - b).abs());
        }
        for (row, coords) in centred.iter().zip(&got.coordinates) {
            let want: f64 = row.iter().zip(&axis).map(|(x, a)| x * a).sum();
            worst = worst.max((want - coords[k]).abs());
        }
    }
    c.expect(worst <= 1e-9, || format!("projection differs from the oracle by {worst:.1e}"));
    c.outcome(format!("3-D subspace variance sum 1{:+.1e}; 9x4 projection max err {worst:.1e}", sum - 1.0))
}

// ---------------------------------------------------------------------------
// 12. statistical narrative

/// Tukey HSD holds the family-wise error at alpha per dataset, so across
/// many datasets a few null pairs are expected to cross it. Every planted
/// pair must be detected; datasets with a false positive must stay within
/// the 99% binomial bound at that alpha.
fn ac12_planted_model() -> Outcome {
    let datasets = 20u64;
    let mut c = Checks::default();
    let mut false_positive_sets = 0u64;
    for seed in 0..datasets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let planted = (seed % 5) as usize;
        let models: Vec<SampleVector> = (0..5)
            .map(|m| {
                let lift = if m == planted { 0.15 } else { 0.0 };
                sv(&format!("m{m}"), (0..10).map(|_| 0.75 + lift + noise.sample(&mut rng)).collect())
            })
            .collect();
        let r = compare_models(&models, "accuracy").unwrap();
        let name = format!("m{planted}");
        c.expect(r.omnibus.as_ref().is_some_and(|o| o.significant), || format!("seed {seed}: omnibus not significant"));
        c.expect(r.pairwise.len() == 10, || format!("seed {seed}: {} pairs", r.pairwise.len()));
        let mut spurious = false;
        for p in &r.pairwise {
            let involves = p.model_a == name || p.model_b == name;
            if involves {
                c.expect(p.result.significant, || format!("seed {seed}: {} vs {} missed", p.model_a, p.model_b));
            } else {
                spurious |= p.result.significant;
            }
        }
        false_positive_sets += u64::from(spurious);
    }
    let bound = Binomial::new(mpox_screen::stats::ALPHA, datasets).unwrap().inverse_cdf(0.99);
    c.expect(false_positive_sets <= bound, || {
        format!("{false_positive_sets} of {datasets} datasets flag a null pair (bound {bound})")
    });
    c.outcome(format!(
        "{datasets} synthetic 5-model x 10-fold sets: planted pairs always significant, \
         exact flag set on {} ({false_positive_sets} with a null-pair false positive, 99% bound {bound})",
        datasets - false_positive_sets
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "dataset and fold properties", ac1_folds),
        (2, "metric oracle equivalence", ac2_metrics),
        (3, "binary reproduction band", ac3_binary),
        (4, "multiclass reproduction band", ac4_multiclass),
        (5, "quantization size ratio", ac5_size_ratio),
        (6, "quantization accuracy stability", ac6_quantized_accuracy),
        (7, "Grad-CAM oracle", ac7_grad_cam),
        (8, "statistics oracle suite", ac8_statistics),
        (9, "Hyperband schedule exactness", ac9_hyperband),
        (10, "benchmark protocol fidelity", ac10_benchmark),
        (11, "PCA", ac11_pca),
        (12, "statistical narrative parity", ac12_planted_model),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let default_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            fail(format!("panicked: {msg}"))
        });
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!("AC{n:02} {status} {name}: {} [{:.1}s]", outcome.detail, start.elapsed().as_secs_f64());
        if !outcome.pass {
            failed.push(n);
        }
    }
    std::panic::set_hook(default_hook);
    println!("acceptance: {} failing {:?}", failed.len(), failed);
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
