use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hinet::data::{DatasetLayout, PhantomConfig};
use hinet::experiments::{DatasetSource, RunConfig, FINAL_MODEL, METRICS_TABLE, RUN_MANIFEST};
use hinet::model::ModelConfig;
use hinet::trainer::{TrainConfig, LOSS_LOG};

fn hinet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hinet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(path: &Path) {
    let mut phantom = PhantomConfig::new(4, (32, 32), 2);
    phantom.slices = 2;
    let cfg = RunConfig {
        dataset: DatasetSource::Phantom(phantom),
        train_fraction: 0.5,
        model: ModelConfig::default().scaled(4).with_input_size(32, 32),
        train: TrainConfig {
            epochs: 2,
            decay_start_epoch: 1,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn phantom_gen_writes_a_scannable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = hinet(&["phantom-gen", "--out", p(&out), "--subjects", "3", "--rows", "32", "--cols", "32", "--slices", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let layout = DatasetLayout::new(&out);
    let manifest = layout.read_manifest().unwrap();
    assert_eq!(manifest.subjects.len(), 3);
    assert_eq!(layout.scan().unwrap(), manifest);

    let prepared = dir.path().join("prepared");
    let o = hinet(&["prepare-data", "--input", p(&out), "--out", p(&prepared), "--format", "nifti"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(prepared.join("phantom001").join("flair.nii").exists());
}

#[test]
fn train_evaluate_report_and_synthesize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    write_config(&cfg);
    let run = dir.path().join("run");
    let o = hinet(&["--config", p(&cfg), "--run-dir", p(&run), "--seed", "3", "train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [RUN_MANIFEST, LOSS_LOG, FINAL_MODEL] {
        assert!(run.join(f).exists(), "{f}");
    }

    let o = hinet(&["--run-dir", p(&run), "evaluate"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("T1+T2->Flair"));
    assert!(run.join(METRICS_TABLE).exists());

    let o = hinet(&["--run-dir", p(&run), "report"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("loss_curves.png").exists() && run.join("image_grid.png").exists());

    let data = dir.path().join("data");
    let o = hinet(&["phantom-gen", "--out", p(&data), "--subjects", "1", "--rows", "32", "--cols", "32", "--slices", "2"]);
    assert_eq!(code(&o), 0);
    let out = dir.path().join("synth");
    let model = run.join(FINAL_MODEL);
    let subject = data.join("phantom000");
    let args = ["synthesize", "--checkpoint", p(&model), "--subject-dir", p(&subject), "--out-dir", p(&out)];
    let o = hinet(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("flair.hinv").exists());
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // missing --run-dir is an argument error
    assert_eq!(code(&hinet(&["train"])), 2);
    assert_eq!(code(&hinet(&["no-such-command"])), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&hinet(&["--config", p(&bad), "--run-dir", p(&run), "train"])), 2);
    // missing files are i/o errors
    let missing = dir.path().join("missing");
    assert_eq!(code(&hinet(&["--run-dir", p(&missing), "evaluate"])), 3);
    let args = ["synthesize", "--checkpoint", p(&missing), "--subject-dir", p(&missing), "--out-dir", p(&missing)];
    assert_eq!(code(&hinet(&args)), 3);
    assert_eq!(
        code(&hinet(&["synthesize", "--checkpoint", "x", "--subject-dir", "y", "--out-dir", "z", "--sources", "t1"])),
        2
    );
}
