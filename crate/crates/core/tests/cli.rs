use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::CommandFactory;
use mpox_screen::cli::{run, Cli};
use mpox_screen::data::scan_image_folder;
use mpox_screen::deploy::{BenchmarkReport, ModelArtifact, Precision};
use mpox_screen::eval::CvReport;
use mpox_screen::hpo::{read_trial_log, ExplorationData};
use mpox_screen::labels::ClassLabel;

const PER_CLASS: u32 = 12;

/// `<root>/<class>/<n>.png`, one tint per class plus per-image noise, and a
/// manifest CSV next to the class folders.
fn dataset(root: &Path) -> PathBuf {
    for label in ClassLabel::ALL {
        let dir = root.join(label.name());
        std::fs::create_dir_all(&dir).unwrap();
        let tint = [[200u8, 40, 40], [40, 200, 40], [40, 40, 200], [180, 180, 60]][label.code()];
        for i in 0..PER_CLASS {
            let img = image::RgbImage::from_fn(40, 40, |x, y| {
                let n = ((x * 31 + y * 17 + i * 101) % 41) as u8;
                image::Rgb(tint.map(|c| c.saturating_add(n)))
            });
            img.save(dir.join(format!("{i}.png"))).unwrap();
        }
    }
    let m = scan_image_folder(root, "synthetic").unwrap();
    let path = root.join("manifest.csv");
    std::fs::write(&path, m.to_csv().unwrap()).unwrap();
    path
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Env {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    config: PathBuf,
    out: PathBuf,
}

fn env() -> Env {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = dataset(&data);
    let out = tmp.path().join("runs");
    let config = tmp.path().join("pipeline.toml");
    std::fs::write(
        &config,
        format!(
            "manifest = {:?}\nbackbones = [\"MobileNetV3Small\"]\nbackbone_weights = \"random:11\"\n\
             image_size = 32\nk = 3\nseeds = [42]\nhyperband_r = 3\nhyperband_eta = 3\nretrain_epochs = 3\n\
             patience = 0\nbatch_size = 16\noutput_dir = {:?}\n",
            manifest.to_str().unwrap(),
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    Env {
        _tmp: tmp,
        data,
        config,
        out,
    }
}

impl Env {
    fn run(&self, args: &[&str]) -> i32 {
        let mut argv = vec!["mpox-screen", "--config", self.config.to_str().unwrap()];
        argv.extend_from_slice(args);
        run(argv)
    }

    fn run_dir(&self) -> PathBuf {
        let dirs: Vec<_> = std::fs::read_dir(&self.out).unwrap().map(|e| e.unwrap().path()).collect();
        assert_eq!(dirs.len(), 1, "{dirs:?}");
        dirs[0].clone()
    }
}

#[test]
fn help_documents_every_flag_and_exits_zero() {
    assert_eq!(run(["mpox-screen", "--help"]), 0);
    let mut cmd = Cli::command();
    cmd.build();
    let subs: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in ["validate", "folds", "cv", "stats", "xai", "quantize", "bench", "embed", "serve", "report"] {
        assert!(subs.iter().any(|s| s == name), "missing {name}");
    }
    for sub in cmd.get_subcommands_mut() {
        if sub.get_name() == "help" {
            continue;
        }
        let name = sub.get_name().to_string();
        assert_eq!(run(["mpox-screen", name.as_str(), "--help"]), 0, "{name} --help");
        let help = sub.render_long_help().to_string();
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(help.contains(&format!("--{long}")), "{name} help lacks --{long}");
                assert!(arg.get_help().is_some() || arg.get_long_help().is_some(), "{name} --{long} undocumented");
            }
        }
    }
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(run(["mpox-screen", "frobnicate"]), 1);
    assert_eq!(run(["mpox-screen"]), 1);
    assert_eq!(run(["mpox-screen", "cv", "--augment", "--no-augment"]), 1);

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "k = 1\n").unwrap();
    assert_eq!(run(["mpox-screen", "--config", bad.to_str().unwrap(), "folds"]), 1);
    std::fs::write(&bad, "folds = 3\n").unwrap();
    assert_eq!(run(["mpox-screen", "--config", bad.to_str().unwrap(), "folds"]), 1);
    assert_eq!(run(["mpox-screen", "--config", "/nonexistent/pipeline.toml", "folds"]), 1);
    assert_eq!(run(["mpox-screen", "--manifest", "/nonexistent/manifest.csv", "validate"]), 1);
    assert_eq!(run(["mpox-screen", "validate"]), 1);
    assert_eq!(run(["mpox-screen", "serve", "--models", "/nonexistent/models"]), 1);
}

#[test]
fn folds_are_byte_identical_across_runs() {
    let e = env();
    assert_eq!(e.run(&["folds", "--k", "3", "--seed", "42"]), 0);
    let path = e.run_dir().join("folds/folds_k3_seed42.json");
    let first = std::fs::read(&path).unwrap();
    assert_eq!(e.run(&["folds", "--k", "3", "--seed", "42"]), 0);
    assert_eq!(std::fs::read(&path).unwrap(), first);

    assert_eq!(e.run(&["folds", "--k", "3", "--seed", "43"]), 0);
    let dirs = std::fs::read_dir(&e.out).unwrap().count();
    assert_eq!(dirs, 2, "a different seed is a different run");
}

#[test]
fn full_pipeline_on_a_synthetic_dataset() {
    let e = env();
    let before = snapshot(&e.data);

    assert_eq!(e.run(&["validate"]), 0);
    let run = e.run_dir();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("validation.json")).unwrap()).unwrap();
    assert_eq!(v["report"]["passed"], true);
    assert_eq!(v["records"], 48);

    assert_eq!(e.run(&["cv", "--no-augment", "--save-models", "--jobs", "1"]), 0);
    assert_eq!(e.run(&["cv", "--augment"]), 0);
    let plain_path = run.join("cv/MobileNetV3Small_multiclass_noaug_seed42.json");
    let plain_bytes = std::fs::read(&plain_path).unwrap();
    let plain: CvReport = serde_json::from_slice(&plain_bytes).unwrap();
    assert_eq!(plain.folds.len(), 3);
    let cols = serde_json::to_value(&plain.mean).unwrap();
    for m in ["accuracy", "sensitivity", "specificity", "f1"] {
        assert!(cols[m].is_number(), "{m}");
    }
    let trials = read_trial_log(run.join("cv/MobileNetV3Small_multiclass_noaug_seed42/trials_fold0.jsonl")).unwrap();
    assert_eq!(trials, plain.folds[0].trials);

    // rerunning the same configuration rewrites the same bytes
    assert_eq!(e.run(&["cv", "--no-augment", "--jobs", "1"]), 0);
    assert_eq!(std::fs::read(&plain_path).unwrap(), plain_bytes);

    assert_eq!(e.run(&["stats"]), 0);
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("stats/multiclass_seed42_accuracy.json")).unwrap()).unwrap();
    assert_eq!(stats["augmentation"].as_array().unwrap().len(), 1);
    assert_eq!(stats["augmentation"][0]["model"], "MobileNetV3Small");
    assert_eq!(e.run(&["stats", "--metric", "nonsense"]), 2);

    let model = run.join("cv/MobileNetV3Small_multiclass_noaug_seed42/fold0");
    let image = e.data.join("Mpox/0.png");
    assert_eq!(
        e.run(&["xai", "--model", model.to_str().unwrap(), "--image", image.to_str().unwrap(), "--crop", "4,4,30,30"]),
        0
    );
    assert!(run.join("xai/0_overlay.png").is_file());
    assert!(run.join("xai/0_heatmap.png").is_file());
    assert_eq!(e.run(&["xai", "--model", model.to_str().unwrap(), "--id", "acne_3"]), 0);
    assert!(run.join("xai/acne_3_overlay.png").is_file());

    assert_eq!(e.run(&["quantize", "--model", model.to_str().unwrap(), "--evaluate"]), 0);
    let half_dir = run.join("quantize/fold0-fp16");
    assert_eq!(ModelArtifact::read(&half_dir).unwrap().precision(), Precision::Fp16);
    let q: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("quantize/fold0.json")).unwrap()).unwrap();
    assert_eq!(q["evaluation"]["images"], 48);
    assert!(q["size_ratio"].as_f64().unwrap() > 1.9);

    let lock = run.join("bench.lock");
    let args = ["bench", "--model", half_dir.to_str().unwrap(), "--runs", "4", "--warmup", "1", "--threads", "1", "--lock"];
    let mut args = args.to_vec();
    args.push(lock.to_str().unwrap());
    assert_eq!(e.run(&args), 0);
    let bench: BenchmarkReport =
        serde_json::from_str(&std::fs::read_to_string(run.join("bench/MobileNetV3Small_multiclass_fp16_t1.json")).unwrap())
            .unwrap();
    assert_eq!(bench.timings.len(), 4);

    assert_eq!(e.run(&["embed", "--dims", "2"]), 0);
    let emb: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("embed/MobileNetV3Small_multiclass.json")).unwrap()).unwrap();
    assert_eq!(emb["coordinates"].as_array().unwrap().len(), 48);

    assert_eq!(e.run(&["report"]), 0);
    let md = std::fs::read_to_string(run.join("report/summary.md")).unwrap();
    assert!(md.contains("| Accuracy | Sensitivity | Specificity | F-1 Score |"), "{md}");
    assert!(md.contains("## Model size") && md.contains("## Inference time"));
    let explore: ExplorationData =
        serde_json::from_str(&std::fs::read_to_string(run.join("report/exploration/MobileNetV3Small_multiclass_aug_seed42_fold1.json")).unwrap())
            .unwrap();
    assert!(explore.series.contains_key("rotation"));
    let first = std::fs::read(run.join("report/summary.json")).unwrap();
    assert_eq!(e.run(&["report"]), 0);
    assert_eq!(std::fs::read(run.join("report/summary.json")).unwrap(), first);

    assert_eq!(snapshot(&e.data), before, "the dataset directory was modified");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_mpox-screen");
    let code = |args: &[&str]| std::process::Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["bench", "--help"]), Some(0));
    assert_eq!(code(&["frobnicate"]), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none");
    std::fs::create_dir(&missing).unwrap();
    // an empty model directory is a runtime failure, not a usage error
    assert_eq!(
        code(&["xai", "--model", missing.to_str().unwrap(), "--image", "x.png", "--output-dir", tmp.path().to_str().unwrap()]),
        Some(2)
    );
}
