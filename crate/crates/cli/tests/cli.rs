use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use approxdram::numerics::{write_ednt_file, Tensor};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_approxdram")).args(args).output().expect("spawn approxdram")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "approxdram {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{"seed": 3, "samples": 600, "hidden": [32, 32],
 "baseline": {"epochs": 8, "lr": 0.05, "batch": 32},
 "retrain": {"epochs": 2, "lr": 0.05, "batch": 32, "multiplier": 3.0, "max_rounds": 1},
 "trials": 3, "profile_rounds": 2, "closure_trials": 3}"#;

#[test]
fn inject_with_reliable_model_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.ednt");
    let values: Vec<f32> = (0..300).map(|i| (i as f32 - 150.0) * 0.37).collect();
    write_ednt_file(&Tensor::from_f32(vec![3, 100], values).unwrap(), &input).unwrap();
    let model = dir.path().join("model.json");
    fs::write(
        &model,
        r#"{"family": 0, "geometry": {"banks": 1, "rows_per_bank": 16, "bits_per_row": 1024}, "params": {"p": 0.0, "f_a": 0.5}, "seed": 9}"#,
    )
    .unwrap();
    let out = dir.path().join("out.ednt");
    ok(&["inject", "--input", s(&input), "--model", s(&model), "--seed", "4", "--out", s(&out)]);
    assert_eq!(fs::read(&input).unwrap(), fs::read(&out).unwrap());
}

#[test]
fn inject_with_faulty_model_changes_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.ednt");
    write_ednt_file(&Tensor::from_f32(vec![256], vec![1.0; 256]).unwrap(), &input).unwrap();
    let model = dir.path().join("model.json");
    fs::write(
        &model,
        r#"{"family": 0, "geometry": {"banks": 1, "rows_per_bank": 16, "bits_per_row": 1024}, "params": {"p": 0.5, "f_a": 0.5}, "seed": 9}"#,
    )
    .unwrap();
    let a = dir.path().join("a.ednt");
    let b = dir.path().join("b.ednt");
    ok(&["inject", "--input", s(&input), "--model", s(&model), "--out", s(&a)]);
    ok(&["inject", "--input", s(&input), "--model", s(&model), "--out", s(&b)]);
    let (a, b) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(a, fs::read(&input).unwrap());
    assert_eq!(a, b, "same seed and counter must give the same flips");
}

#[test]
fn usage_errors_are_json_on_stderr() {
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(v["error"]["kind"], "usage");
    assert!(out.stdout.is_empty());
}

#[test]
fn runtime_errors_are_json_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{not json").unwrap();
    let out = run(&["fit", "--trace", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert!(v["error"]["kind"].is_string());
    assert!(v["error"]["message"].is_string());

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 1, "bogus": true}"#).unwrap();
    let out = run(&["pipeline", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_and_version_go_to_stdout() {
    let out = ok(&["--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("pipeline"));
    let out = ok(&["--version"]);
    assert!(!out.stdout.is_empty());
}

#[test]
fn device_profile_fit_chain() {
    let dir = tempfile::tempdir().unwrap();
    let dev = dir.path().join("dev.json");
    ok(&["gen-device", "--out", s(&dev)]);
    let trace = dir.path().join("trace.bin");
    ok(&[
        "profile", "--device", s(&dev), "--rounds", "2", "--partition", "0", "--seed", "1", "--out",
        s(&trace),
    ]);
    let fit = dir.path().join("fit.json");
    ok(&["fit", "--trace", s(&trace), "--out", s(&fit)]);
    let v = json_file(&fit);
    assert!(v["chosen_family"].as_u64().unwrap() <= 3, "{v}");
}

#[test]
fn data_train_eval_characterize_map_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.json");
    ok(&["gen-data", "--kind", "bars", "--samples", "400", "--seed", "2", "--out", s(&data)]);
    let model = dir.path().join("model.json");
    ok(&[
        "train", "--data", s(&data), "--hidden", "32,32", "--epochs", "6", "--seed", "2", "--out",
        s(&model),
    ]);

    let dev = dir.path().join("dev.json");
    ok(&["gen-device", "--out", s(&dev)]);
    let trace = dir.path().join("trace.bin");
    ok(&["profile", "--device", s(&dev), "--rounds", "2", "--partition", "2", "--out", s(&trace)]);
    let fit = dir.path().join("fit.json");
    ok(&["fit", "--trace", s(&trace), "--out", s(&fit)]);

    let eval = dir.path().join("eval.json");
    ok(&[
        "eval", "--model", s(&model), "--data", s(&data), "--fit", s(&fit), "--device", s(&dev),
        "--ber", "1e-3", "--trials", "2", "--out", s(&eval),
    ]);
    let acc = &json_file(&eval);
    assert!(acc.to_string().contains("mean"), "{acc}");

    let ch = dir.path().join("char.json");
    ok(&[
        "characterize", "--model", s(&model), "--data", s(&data), "--fit", s(&fit), "--device",
        s(&dev), "--trials", "2", "--resample-map", "--out", s(&ch),
    ]);
    let plan = dir.path().join("plan.json");
    ok(&["map", "--char", s(&ch), "--device", s(&dev), "--out", s(&plan)]);

    let summary = dir.path().join("summary.json");
    ok(&["report", s(&ch), s(&plan), "--out", s(&summary)]);
    let v = json_file(&summary);
    assert_eq!(v["format"], "approxdram-summary/1");
    let text = v.to_string();
    assert!(text.contains("char") && text.contains("plan"), "{text}");
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, TINY).unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let models = dir.path().join("models");
    ok(&["pipeline", "--config", s(&cfg), "--models", s(&models), "--out", s(&a)]);
    ok(&["pipeline", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(models.join("baseline.json").exists() && models.join("boosted.json").exists());

    let v = json_file(&a);
    assert_eq!(v["format"], "approxdram-report/1");
    assert_eq!(v["config"]["seed"], 3);

    let c = dir.path().join("c.json");
    ok(&["pipeline", "--config", s(&cfg), "--seed", "4", "--out", s(&c)]);
    assert_eq!(json_file(&c)["config"]["seed"], 4);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}
