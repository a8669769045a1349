use std::path::Path;
use std::process::{Command, Output};

fn uvlm(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uvlm"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("UVLM_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = uvlm(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

const TINY: &[&str] = &[
    "--set",
    r#"pipeline.corpus={"seed":0,"frames":16,"stage1":{"images":12,"videos":12},"stage2_train":{"images":12,"videos":12},"stage2_val":{"images":2,"videos":2},"stage2_test":{"images":8,"videos":8}}"#,
    "--set",
    "pipeline.align.epochs=1",
    "--set",
    "pipeline.stage2.epochs=1",
    "--set",
    "eval.pope_questions=8",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

fn tiny_pipeline(out: &Path) {
    ok(out, &with_tiny(&["gen-data"]));
    ok(out, &with_tiny(&["align"]));
    ok(out, &with_tiny(&["train", "--stage", "1"]));
    ok(out, &with_tiny(&["train", "--stage", "2"]));
}

#[test]
fn gradcheck_passes_and_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gradcheck", "--seed", "7"]);
    assert!(stdout.contains("max rel error"));
    for p in ["matmul", "layer_norm", "softmax", "gelu", "gather", "attention", "masked_cross_entropy"] {
        assert!(stdout.contains(p), "missing {p} in\n{stdout}");
    }
    assert!(dir.path().join("gradcheck.csv").exists());
}

#[test]
fn stage_one_without_alignment_names_the_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let o = uvlm(dir.path(), &["train", "--stage", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("aligned-encoder checkpoint"), "{err}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["gen-data", "--frobnicate"],
        vec!["teleport"],
        vec!["train", "--stage", "3"],
        vec!["eval", "--suite", "vibes"],
        vec!["ablate", "--axis", "colour"],
        vec!["gen-data", "--set", "pipeline.stage2.learning_rate=1"],
        vec!["gen-data", "--config", "/nonexistent/config.json"],
    ] {
        assert_eq!(uvlm(dir.path(), &args).status.code(), Some(1), "{args:?}");
    }
    assert_eq!(uvlm(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_faults_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.uvlm");
    std::fs::write(&bad, b"not a payload").unwrap();
    let o = uvlm(dir.path(), &["generate", "--input", bad.to_str().unwrap(), "--prompt", "what color is it?"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("format error"));
}

#[test]
fn demo_checkpoint_answers_in_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.uvlm");
    ok(dir.path(), &["render-scene", "--path", scene.to_str().unwrap()]);
    let stdout = ok(
        dir.path(),
        &["generate", "--input", scene.to_str().unwrap(), "--prompt", "what color is the square?"],
    );
    assert_eq!(stdout.lines().count(), 1, "{stdout:?}");
    assert!(!stdout.trim().is_empty());
}

#[test]
fn config_file_is_overridden_by_flags_and_snapshotted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"pipeline": {"stage2": {"lr": 0.5, "epochs": 3}}}"#).unwrap();
    let args = [
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "pipeline.stage2.lr=0.25",
        "--seed",
        "4",
    ];
    ok(dir.path(), &with_tiny(&args));
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gen-data.config.json")).unwrap()).unwrap();
    let s2 = &snap["config"]["pipeline"]["stage2"];
    assert_eq!(s2["lr"], 0.25);
    // TINY comes after the file, so its epochs win as well
    assert_eq!(s2["epochs"], 1);
    assert_eq!(s2["seed"], 4);
    assert_eq!(snap["config"]["pipeline"]["corpus"]["seed"], 4);
}

#[test]
fn output_root_defaults_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_uvlm"))
        .args(with_tiny(&["gen-data"]))
        .env("UVLM_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("data/manifest.jsonl").exists());
    assert!(dir.path().join("gen-data.config.json").exists());
}

#[test]
fn full_pipeline_is_reproducible_and_resumable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_pipeline(a.path());
    tiny_pipeline(b.path());
    for f in ["aligned.uvck", "stage1.uvck", "stage2.uvck", "metrics.csv", "data/manifest.jsonl"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
    let metrics = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,stage,split,metric,value\n"));
    assert!(metrics.contains(",stage2,train,loss,"));

    for suite in ["qa", "pope", "gap"] {
        let stdout = ok(a.path(), &with_tiny(&["eval", "--suite", suite]));
        assert!(!stdout.is_empty());
        assert!(a.path().join(format!("eval-{suite}.json")).exists());
        assert!(a.path().join(format!("eval-{suite}.config.json")).exists());
    }

    // interrupted stage 2 continued from its own checkpoint
    let c = tempfile::tempdir().unwrap();
    for f in ["data", "stage1.uvck"] {
        copy(&a.path().join(f), &c.path().join(f));
    }
    ok(c.path(), &with_tiny(&["train", "--stage", "2", "--until", "1"]));
    let partial = c.path().join("partial.uvck");
    std::fs::rename(c.path().join("stage2.uvck"), &partial).unwrap();
    ok(
        c.path(),
        &with_tiny(&["train", "--stage", "2", "--checkpoint", partial.to_str().unwrap()]),
    );
    assert!(
        std::fs::read(c.path().join("stage2.uvck")).unwrap() == std::fs::read(a.path().join("stage2.uvck")).unwrap(),
        "resumed checkpoint differs from the uninterrupted one"
    );
}

fn copy(from: &Path, to: &Path) {
    if from.is_dir() {
        std::fs::create_dir_all(to).unwrap();
        for e in std::fs::read_dir(from).unwrap() {
            let e = e.unwrap();
            copy(&e.path(), &to.join(e.file_name()));
        }
    } else {
        std::fs::copy(from, to).unwrap();
    }
}
