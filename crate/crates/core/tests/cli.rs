use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dcafuse::checkpoint::load_checkpoint;
use dcafuse::fusion::FusionRegistry;
use dcafuse::gradsuite::GradSuite;
use dcafuse::synthscene::LabeledScene;
use serde_json::Value;

fn dcafuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcafuse"))
        .args(args)
        .env_remove("DCAFUSE_THREADS")
        .output()
        .expect("binary runs")
}

fn run(cmd: &str, dir: &Path, config: &str, out: &str, extra: &[&str]) -> Output {
    let path = dir.join(format!("{out}.json"));
    fs::write(&path, config).unwrap();
    let out_dir = dir.join(out);
    let mut args = vec![cmd, "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    dcafuse(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_SCENE: &str = r#""scene": {"n_points": 48, "image_px": 128, "max_range_m": 6.0}"#;
const TINY_TRAIN: &str = r#""train": {"epochs": 2, "batch_points": 32, "lr": 0.003, "weight_decay": 0.01, "optimizer": "adamw"}"#;

#[test]
fn gradcheck_reports_every_primitive_and_copies_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = "{\"command\": \"gradcheck\",\n  \"gradcheck\": {\"seeds\": 2}}\n";
    let o = run("gradcheck", tmp.path(), config, "gc", &["--threads", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(tmp.path().join("gc/config.json")).unwrap(), config);
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("gc/report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["cases"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, GradSuite::standard().names());
    assert!(report["cases"].as_array().unwrap().iter().all(|c| c["max_rel_error"].is_number()));
}

#[test]
fn corrupted_backward_fails_naming_the_primitive() {
    let tmp = tempfile::tempdir().unwrap();
    let config = r#"{"command": "gradcheck", "gradcheck": {"seeds": 2, "fault_injection": "softmax"}}"#;
    let o = run("gradcheck", tmp.path(), config, "gc", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("softmax"), "{}", stderr(&o));
    assert!(tmp.path().join("gc/report.json").exists());
}

#[test]
fn invalid_config_names_the_field_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    for (cmd, config, field) in [
        ("genscene", r#"{"command": "genscene", "scene": {"n_points": 0}}"#, "scene.n_points"),
        ("genscene", r#"{"command": "genscene", "scene": {"nosie_std": 0.1}}"#, "nosie_std"),
        ("train", r#"{"command": "train", "fusion": "two_to_two"}"#, "fusion"),
        ("robustness", r#"{"command": "robustness", "experiment": {"n_seeds": 2}}"#, "n_seeds"),
        ("genscene", r#"{"command": "train", "fusion": "one_to_one"}"#, "command"),
    ] {
        let o = run(cmd, tmp.path(), config, "bad", &[]);
        assert_eq!(o.status.code(), Some(2), "{config}");
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.contains(field), "{field}: {err}");
        assert!(!tmp.path().join("bad").exists());
    }
    let listing: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(listing.iter().all(|n| n.to_string_lossy().ends_with(".json")), "{listing:?}");
}

#[test]
fn existing_output_is_kept_unless_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let config = format!(r#"{{"command": "genscene", {TINY_SCENE}}}"#);
    assert!(run("genscene", tmp.path(), &config, "scene", &[]).status.success());
    fs::write(tmp.path().join("scene/marker"), "x").unwrap();

    let o = run("genscene", tmp.path(), &config, "scene", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--overwrite"));
    assert!(tmp.path().join("scene/marker").exists());

    assert!(run("genscene", tmp.path(), &config, "scene", &["--overwrite"]).status.success());
    assert!(!tmp.path().join("scene/marker").exists());
}

#[test]
fn genscene_is_deterministic_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let config = format!(r#"{{"command": "genscene", {TINY_SCENE}}}"#);
    assert!(run("genscene", tmp.path(), &config, "a", &["--seed", "5"]).status.success());
    assert!(run("genscene", tmp.path(), &config, "b", &["--seed", "5"]).status.success());
    assert!(run("genscene", tmp.path(), &config, "c", &["--seed", "6"]).status.success());
    let files = |d: &str| {
        let mut v: Vec<_> = fs::read_dir(tmp.path().join(d).join("scene")).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v.into_iter().map(|p| (p.file_name().unwrap().to_owned(), fs::read(&p).unwrap())).collect::<Vec<_>>()
    };
    assert_eq!(files("a"), files("b"));
    assert_ne!(files("a"), files("c"));
    let scene = LabeledScene::load(&tmp.path().join("a/scene")).unwrap();
    assert_eq!(scene.config.seed, 5);
    assert_eq!(scene.labels.len(), 48);
}

#[test]
fn train_writes_a_loadable_checkpoint_and_history() {
    let tmp = tempfile::tempdir().unwrap();
    let config = format!(
        r#"{{"command": "train", "fusion": "dca_with_dqe", "seed": 1, "train_scenes": 2, "eval_scenes": 1,
            "eval_disturbance": {{}}, {TINY_SCENE}, {TINY_TRAIN}}}"#
    );
    let o = run("train", tmp.path(), &config, "t", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("t");
    let history = fs::read_to_string(dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,loss,train_accuracy"));
    assert_eq!(history.lines().count(), 3);
    let eval: Value = serde_json::from_str(&fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["clean"]["n_points"], 48);
    assert!(eval["disturbed"]["accuracy"].is_number());
    let (_, manifest) = load_checkpoint(&dir.join("checkpoint"), &FusionRegistry::standard()).unwrap();
    assert_eq!(manifest.fusion, "dca_with_dqe");
}

#[test]
fn robustness_csv_has_a_row_per_cell_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let config = format!(
        r#"{{"command": "robustness", "experiment": {{"n_seeds": 3, "train_scenes": 1, "eval_scenes": 1, {TINY_SCENE},
            "train": {{"epochs": 1, "batch_points": 48, "lr": 0.003, "weight_decay": 0.01, "optimizer": "adamw"}}}}}}"#
    );
    let a = run("robustness", tmp.path(), &config, "a", &[]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(String::from_utf8_lossy(&a.stdout).contains("dca_with_dqe"));
    let b = run("robustness", tmp.path(), &config, "b", &["--threads", "1"]);
    assert!(b.status.success());
    let csv_a = fs::read(tmp.path().join("a/robustness.csv")).unwrap();
    assert_eq!(csv_a, fs::read(tmp.path().join("b/robustness.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&csv_a).lines().count(), 1 + 12 * 3);
    let summary: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("a/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 12);
}

#[test]
fn thread_count_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("g.json");
    fs::write(&path, format!(r#"{{"command": "genscene", {TINY_SCENE}}}"#)).unwrap();
    let out = tmp.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_dcafuse"))
        .args(["genscene", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("DCAFUSE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--threads"));
    assert!(!out.exists());
}
