use std::fs;
use std::path::Path;

use gafdetect::dataset::{load_dataset, Split};
use gafdetect::evalcli::{cli_main, EvalReport, CHECKPOINT_FILE, TRAIN_LOG_FILE};

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["gafdetect"];
    argv.extend_from_slice(args);
    cli_main(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gendata_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(run(&["gendata", "--seed", "7", "--bars", "3000", "--out", s(&a)]), 0);
    assert_eq!(run(&["gendata", "--seed", "7", "--bars", "3000", "--out", s(&b)]), 0);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 3001);
    let c = dir.path().join("c.csv");
    assert_eq!(run(&["gendata", "--seed", "8", "--bars", "3000", "--out", s(&c)]), 0);
    assert_ne!(text, fs::read_to_string(&c).unwrap());
}

#[test]
fn usage_and_pipeline_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(run(&["gendata", "--bogus", "--out", s(&out)]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["gendata"]), 2);
    assert_eq!(run(&["build-dataset", "--feature-set", "hsv", "--out-dir", s(&out)]), 2);
    let missing = dir.path().join("missing.csv");
    assert_eq!(run(&["build-dataset", "--input-csv", s(&missing), "--out-dir", s(&out)]), 2);
    assert_eq!(run(&["train", "--dataset", s(&missing), "--out-dir", s(&out)]), 2);
    assert_eq!(run(&["detect", "--checkpoint", s(&missing), "--input", s(&missing)]), 2);
    // too short to synthesize is a pipeline failure
    assert_eq!(run(&["gendata", "--bars", "10", "--out", s(&out)]), 1);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    assert_eq!(run(&["gendata", "--seed", "3", "--bars", "40000", "--out", s(&raw)]), 0);
    let build = [
        "build-dataset",
        "--input-csv", s(&raw),
        "--feature-set", "ohlc",
        "--targets-per-class", "3",
        "--max-per-class", "12",
        "--out-dir", s(&data),
    ];
    assert_eq!(run(&build), 0);
    let dataset = load_dataset(&data).unwrap();
    assert_eq!(dataset.records.len(), 96);
    let manifest = fs::read_to_string(data.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"source\": \"csv\""));

    let train = [
        "train",
        "--dataset", s(&data),
        "--epochs", "2",
        "--batch-size", "16",
        "--widths", "2,2,2,2,2,2",
        "--seed", "5",
        "--out-dir", s(&model),
    ];
    assert_eq!(run(&train), 0);
    let log = fs::read_to_string(model.join(TRAIN_LOG_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,val_cls_acc,val_win_acc");
    assert_eq!(lines.len(), 3);
    let ckpt = model.join(CHECKPOINT_FILE);
    assert!(ckpt.exists());

    let report = dir.path().join("report.json");
    let confusion = dir.path().join("confusion.csv");
    let eval = [
        "eval",
        "--dataset", s(&data),
        "--checkpoint", s(&ckpt),
        "--split", "val",
        "--json", s(&report),
        "--confusion-csv", s(&confusion),
    ];
    assert_eq!(run(&eval), 0);
    let r: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.samples, dataset.records.iter().filter(|x| x.split == Split::Val).count());
    assert_eq!(fs::read_to_string(&confusion).unwrap().lines().count(), 13);
    assert_eq!(run(&["eval", "--dataset", s(&data), "--checkpoint", s(&ckpt), "--split", "later"]), 2);

    let detections = dir.path().join("det.csv");
    let detect = ["detect", "--checkpoint", s(&ckpt), "--input", s(&raw), "--threshold", "0", "--out", s(&detections)];
    assert_eq!(run(&detect), 0);
    let text = fs::read_to_string(&detections).unwrap();
    assert_eq!(text.lines().next().unwrap(), "end_timestamp,class_name,window_size,score");
    assert_eq!(text.lines().count(), 1 + 40000 - 15);
    assert_eq!(run(&["detect", "--checkpoint", s(&ckpt), "--input", s(&raw), "--threshold", "2"]), 1);

    let svg = dir.path().join("chart.svg");
    assert_eq!(run(&["render", "--input", s(&raw), "--checkpoint", s(&ckpt), "--out", s(&svg)]), 0);
    let first = fs::read_to_string(&svg).unwrap();
    assert_eq!(first.matches("class=\"candle\"").count(), 16);
    assert_eq!(run(&["render", "--input", s(&raw), "--checkpoint", s(&ckpt), "--out", s(&svg)]), 0);
    assert_eq!(fs::read_to_string(&svg).unwrap(), first);
    let labelled = ["render", "--input", s(&raw), "--label", "MorningStar", "--window-size", "7", "--out", s(&svg)];
    assert_eq!(run(&labelled), 0);
    assert!(fs::read_to_string(&svg).unwrap().contains("MorningStar (w=7)"));
    assert_eq!(run(&["render", "--input", s(&raw), "--out", s(&svg)]), 2);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(run(&["gendata", "--seed", "21", "--bars", "1500", "--out", s(&a)]), 0);
    std::env::set_var("GAFDETECT_SEED", "21");
    let code = run(&["gendata", "--bars", "1500", "--out", s(&b)]);
    std::env::remove_var("GAFDETECT_SEED");
    assert_eq!(code, 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}
