use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fsq_oracle::synthetic;
use serde_json::Value;
use tempfile::TempDir;

fn fsq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsq"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn fsq")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[track_caller]
fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    dir: TempDir,
}

impl Run {
    fn new(classes: usize, per_class: usize) -> Run {
        let dir = tempfile::tempdir().unwrap();
        synthetic::write(&dir.path().join("data"), classes, per_class, 32, 1);
        Run { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Trains the tiny network with the overfit recipe; `extra` flags
    /// replace the matching defaults.
    fn train(&self, out: &str, epochs: usize, extra: &[&str]) -> Output {
        let data = self.path("data");
        let out = self.path(out);
        let epochs = epochs.to_string();
        let mut args = vec!["train", "--data", s(&data), "--out", s(&out), "--deterministic"];
        let defaults = [
            ("--arch", "tiny"),
            ("--image-size", "32"),
            ("--epochs", epochs.as_str()),
            ("--lr", "0.01"),
            ("--batch", "4"),
            ("--augment", "false"),
        ];
        for (flag, value) in defaults {
            if !extra.contains(&flag) {
                args.extend([flag, value]);
            }
        }
        args.extend_from_slice(extra);
        fsq(&args)
    }
}

fn metric_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    assert_eq!(code(&fsq(&["train", "--out", "x.fsq"])), 2);
    assert_eq!(code(&fsq(&["inspect"])), 2);
    assert_eq!(
        code(&fsq(&["predict", "--checkpoint", "a", "--image", "b", "--top", "0"])),
        2
    );
}

#[test]
fn invalid_hyperparameters_are_usage_errors() {
    let run = Run::new(2, 2);
    assert_eq!(code(&run.train("m.fsq", 1, &["--batch", "0"])), 2);
    assert_eq!(code(&run.train("m.fsq", 1, &["--momentum", "1.5"])), 2);
    assert_eq!(code(&run.train("m.fsq", 1, &["--image-size", "8"])), 2);
    assert!(!run.path("m.fsq").exists());
}

#[test]
fn missing_dataset_is_a_data_error() {
    let run = Run::new(2, 2);
    let out = fsq(&["train", "--data", s(&run.path("nope")), "--out", s(&run.path("m.fsq"))]);
    assert!(matches!(code(&out), 3 | 4), "{out:?}");
}

#[test]
fn train_eval_predict_and_inspect() {
    let run = Run::new(2, 20);
    let out = run.train("m.fsq", 15, &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.path("m.fsq");
    assert!(ckpt.exists());

    // One stdout line per epoch; the metrics file adds a header.
    assert_eq!(stdout(&out).lines().count(), 15);
    let lines = metric_lines(&run.path("m.fsq.metrics.jsonl"));
    assert_eq!(lines.len(), 16);
    assert_eq!(lines[0]["header"]["classes"], serde_json::json!(["blue", "green"]));
    assert_eq!(lines[0]["header"]["train_samples"], 36);
    let last = &lines[15];
    assert_eq!(last["epoch"], 15);
    assert!(last["train_acc"].as_f64().unwrap() >= 0.95, "{last}");
    assert_eq!(last["seconds"], 0.0);

    let confusion = run.path("confusion.csv");
    let out = fsq(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&run.path("data")),
        "--confusion",
        s(&confusion),
    ]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(report["n"], 40);
    assert!(report["accuracy"].as_f64().unwrap() >= 0.95, "{report}");
    let csv = std::fs::read_to_string(&confusion).unwrap();
    let rows: Vec<u64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).sum())
        .collect();
    assert_eq!(rows, [20, 20]);

    let image = run.path("data/green/3.ppm");
    let out = fsq(&["predict", "--checkpoint", s(&ckpt), "--image", s(&image), "--top", "5"]);
    assert_eq!(code(&out), 0);
    let ranked: Vec<Value> = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(ranked.len(), 2, "top is clamped to the class count");
    assert_eq!(ranked[0]["label"], "green");
    let p: Vec<f64> = ranked.iter().map(|r| r["p"].as_f64().unwrap()).collect();
    assert!(p[0] >= p[1]);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);

    let out = fsq(&["inspect", "--checkpoint", s(&ckpt), "--json"]);
    assert_eq!(code(&out), 0);
    let info: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(info["total_params"], 806);
    assert_eq!(info["labels"], serde_json::json!(["blue", "green"]));
    assert_eq!(info["input_shape"], serde_json::json!([3, 32, 32]));

    // Resuming with a different architecture is refused before any training.
    let resume = ["--resume", s(&ckpt)];
    let out = run.train("other.fsq", 1, &[&resume[..], &["--image-size", "48"]].concat());
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!run.path("other.fsq").exists());

    // A compatible resume continues from the history stored with the best
    // checkpoint, not from the last epoch run.
    let val: Vec<f64> = lines[1..].iter().map(|l| l["val_acc"].as_f64().unwrap()).collect();
    let best = val.iter().copied().fold(0.0, f64::max);
    let saved_at = val.iter().position(|&v| v == best).unwrap() as u64 + 1;
    let out = run.train("resumed.fsq", 2, &resume);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let epochs: Vec<u64> = stdout(&out)
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, [saved_at + 1, saved_at + 2]);
}

#[test]
fn deterministic_runs_write_identical_files() {
    let run = Run::new(2, 6);
    let extra = ["--augment", "true", "--flip", "true", "--dropout", "true"];
    ok(run.train("a.fsq", 3, &extra));
    ok(run.train("b.fsq", 3, &extra));
    let read = |name: &str| std::fs::read(run.path(name)).unwrap();
    assert_eq!(read("a.fsq"), read("b.fsq"));
    assert_eq!(read("a.fsq.metrics.jsonl"), read("b.fsq.metrics.jsonl"));
}

#[test]
fn metrics_path_must_not_clobber_the_checkpoint() {
    let run = Run::new(2, 2);
    let out = run.train("m.fsq", 1, &["--metrics", s(&run.path("m.fsq"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_and_predict_failures_map_to_exit_codes() {
    let run = Run::new(3, 4);
    ok(run.train("m.fsq", 1, &[]));
    let ckpt = run.path("m.fsq");

    // A class the checkpoint has never seen.
    synthetic::write(&run.path("more"), 4, 2, 32, 2);
    let out = fsq(&["eval", "--checkpoint", s(&ckpt), "--data", s(&run.path("more"))]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("yellow"));

    // A subset of the checkpoint classes is fine.
    std::fs::remove_dir_all(run.path("data/green")).unwrap();
    let out = ok(fsq(&["eval", "--checkpoint", s(&ckpt), "--data", s(&run.path("data"))]));
    let report: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(report["n"], 8);

    let junk = run.path("junk.ppm");
    std::fs::write(&junk, b"P6\n2 2\n255\nxx").unwrap();
    assert_eq!(
        code(&fsq(&["predict", "--checkpoint", s(&ckpt), "--image", s(&junk)])),
        3
    );
    assert_eq!(
        code(&fsq(&[
            "predict",
            "--checkpoint",
            s(&ckpt),
            "--image",
            s(&run.path("none.ppm"))
        ])),
        4
    );

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = run.path("bad.fsq");
    std::fs::write(&bad, bytes).unwrap();
    assert_eq!(code(&fsq(&["inspect", "--checkpoint", s(&bad)])), 3);
    assert_eq!(code(&fsq(&["inspect", "--checkpoint", s(&run.path("gone.fsq"))])), 4);
}

#[test]
fn inspect_describes_the_default_network() {
    let out = fsq(&["inspect", "--arch-only", "--json"]);
    assert_eq!(code(&out), 0);
    let info: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(info["total_params"], 997_464);
    assert_eq!(info["input_shape"], serde_json::json!([3, 244, 244]));
    let layers = info["layers"].as_array().unwrap();
    let names: Vec<&str> = layers.iter().map(|l| l["name"].as_str().unwrap()).collect();
    assert_eq!(names.first(), Some(&"conv1"));
    assert_eq!(names.last(), Some(&"softmax"));
    assert_eq!(names.iter().filter(|n| n.starts_with("fire")).count(), 8);
    let summed: u64 = layers.iter().map(|l| l["params"].as_u64().unwrap()).sum();
    assert_eq!(summed, 997_464);
    assert_eq!(layers.last().unwrap()["output_shape"], serde_json::json!([24]));

    let table = stdout(&fsq(&[
        "inspect",
        "--arch-only",
        "--arch",
        "tiny",
        "--classes",
        "4",
        "--image-size",
        "32",
    ]));
    assert_eq!(table.lines().last(), Some("total parameters: 872"));
}
