use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use jewelcap::augment::Image;
use jewelcap::captioner::CaptionerModel;
use jewelcap::synth::{Corpus, Split};

fn jewelcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jewelcap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_tiny(dir: &Path) {
    let o = jewelcap(&[
        "gen-data",
        "--n",
        "40",
        "--multiplier",
        "1",
        "--seed",
        "7",
        "--image-size",
        "8",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_2() {
    let o = jewelcap(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    let o = jewelcap(&[]);
    assert_eq!(o.status.code(), Some(2));
    let o = jewelcap(&["train", "--corpus", "x", "--out", "y", "--optimizer", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let o = jewelcap(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = jewelcap(&["eval", "--model", missing.to_str().unwrap(), "--corpus", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn gen_data_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    gen_tiny(&out);
    let corpus = Corpus::load(&out).unwrap();
    assert_eq!(corpus.samples.len(), 40);
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 40);
}

#[test]
fn train_caption_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    gen_tiny(&corpus_dir);
    let run = dir.path().join("run");
    let config = dir.path().join("train.json");
    fs::write(
        &config,
        r#"{"task": "classification", "neurons": 8, "embed_dim": 8, "max_epochs": 2, "lr": 0.01, "batch_size": 8}"#,
    )
    .unwrap();
    let o = jewelcap(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--corpus",
        corpus_dir.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("model.ckpt");
    let model = CaptionerModel::load(&ckpt).unwrap();
    assert_eq!(model.config().neurons, 8);
    assert_eq!(model.config().embed_dim, 8);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);

    let corpus = Corpus::load(&corpus_dir).unwrap();
    let sample = corpus.split(Split::Test)[0];
    let png = corpus_dir.join("images").join(format!("{}.png", sample.id));
    let o = jewelcap(&[
        "caption",
        "--model",
        ckpt.to_str().unwrap(),
        "--image",
        png.to_str().unwrap(),
        "--level",
        "basic",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let expected = model.describe(&Image::load_png(&png).unwrap()).unwrap();
    assert_eq!(stdout(&o), format!("{expected}\n"));
    assert!(["necklace", "ring", "earring", "bracelet"].contains(&expected.as_str()));

    let o = jewelcap(&[
        "caption",
        "--model",
        ckpt.to_str().unwrap(),
        "--image",
        png.to_str().unwrap(),
        "--level",
        "complete",
    ]);
    assert_eq!(o.status.code(), Some(1));

    let o = jewelcap(&["eval", "--model", ckpt.to_str().unwrap(), "--corpus", corpus_dir.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("Class Precision Recall F1-Score\n"));
    assert!(text.contains("\nCCR "));
}

#[test]
fn grid_writes_ranked_table() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    gen_tiny(&corpus_dir);
    let out = dir.path().join("grid");
    let o = jewelcap(&[
        "grid",
        "--corpus",
        corpus_dir.to_str().unwrap(),
        "--task",
        "classification",
        "--decoders",
        "gru,lstm",
        "--neurons",
        "64",
        "--embed-dim",
        "8",
        "--max-epochs",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("grid.txt")).unwrap();
    assert_eq!(stdout(&o), table);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].split_whitespace().collect::<Vec<_>>().join(" "), "CNN RNN Neurons Val. CCR Val. Loss Test CCR");
    assert!(lines[1].ends_with("<- best"));
    assert!(out.join("best.ckpt").exists());
    assert!(out.join("grid.json").exists());
}

#[test]
fn config_flags_yield_to_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"n": 999, "seed": 3, "out": "/nonexistent/ignored"}"#).unwrap();
    let argv: Vec<std::ffi::OsString> = ["jewelcap", "gen-data", "--config", cfg.to_str().unwrap(), "--n", "40"]
        .iter()
        .map(Into::into)
        .collect();
    let merged = jewelcap_cli::merge_config_args(argv).unwrap();
    let merged: Vec<String> = merged.iter().map(|s| s.to_string_lossy().into_owned()).collect();
    assert_eq!(merged.iter().filter(|a| *a == "--n").count(), 1);
    assert!(merged.windows(2).any(|w| w[0] == "--seed" && w[1] == "3"));
    assert!(merged.windows(2).any(|w| w[0] == "--out" && w[1] == "/nonexistent/ignored"));
}
