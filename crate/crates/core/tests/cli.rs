//! End-to-end exercises of the command-line surface: generation, mapping,
//! analysis exports, overrides, exit codes, resume.

use std::path::Path;
use std::process::Command;

fn elma() -> Command {
    Command::new(env!("CARGO_BIN_EXE_elma"))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn generate_map_analyze_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // --- generate a separable GMM dataset
    let out = elma()
        .args([
            "generate", "gmm", "--k", "2", "--dim", "1", "--sep", "3.0", "--m", "60", "--seed",
            "5", "--out",
        ])
        .arg(root.join("data"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("data/dataset.json").exists());
    assert!(root.join("data/truth.json").exists());
    let echo = String::from_utf8_lossy(&out.stdout);
    assert!(echo.contains("separability"), "no derived quantity echoed");

    // --- map it
    write(
        &root.join("run.toml"),
        &format!(
            r#"
[model]
kind = "gmm"
dataset = "data/dataset.json"
k = 2

[sampler]
budget = 3000
seed = 11

[pipeline]
merge_eps = 0.01

[output]
dir = "artifacts"
"#
        ),
    );
    let out = elma()
        .args(["map", "--config"])
        .arg(root.join("run.toml"))
        .arg("--allow-unconverged")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "map failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "elm.json",
        "registry.json",
        "barriers.json",
        "convergence.json",
        "checkpoint.json",
    ] {
        assert!(root.join("artifacts").join(f).exists(), "{f} missing");
    }

    // --- DOT export parses structurally
    let out = elma()
        .args(["analyze", "tree", "--elm"])
        .arg(root.join("artifacts/elm.json"))
        .arg("--dot")
        .arg(root.join("tree.dot"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let dot = std::fs::read_to_string(root.join("tree.dot")).unwrap();
    assert!(dot.starts_with("digraph elm {"));
    assert_eq!(dot.matches('{').count(), dot.matches('}').count());

    // --- mass and volume CSVs carry a meta line
    for (cmd, file) in [("mass", "mass.csv"), ("volume", "volume.csv")] {
        let out = elma()
            .args(["analyze", cmd, "--elm"])
            .arg(root.join("artifacts/elm.json"))
            .arg("--out")
            .arg(root.join(file))
            .output()
            .unwrap();
        assert!(out.status.success());
        let text = std::fs::read_to_string(root.join(file)).unwrap();
        assert!(text.starts_with("# model="), "{file} missing meta comment");
    }

    // --- learners CSV gets algorithm x runs rows
    let out = elma()
        .args(["analyze", "learners", "--config"])
        .arg(root.join("run.toml"))
        .arg("--artifacts")
        .arg(root.join("artifacts"))
        .args(["--alg", "em,kmeans", "--runs", "5", "--truth"])
        .arg(root.join("data/truth.json"))
        .arg("--out")
        .arg(root.join("learners.csv"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "learners failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(root.join("learners.csv")).unwrap();
    let data_rows = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("algorithm"))
        .count();
    assert_eq!(data_rows, 2 * 5, "expected algorithms x runs rows");

    // --- ERC report with AUC
    let out = elma()
        .args(["analyze", "erc", "--config"])
        .arg(root.join("run.toml"))
        .arg("--artifacts")
        .arg(root.join("artifacts"))
        .args(["--alg", "em", "--runs", "5", "--eps-max", "0.5", "--truth"])
        .arg(root.join("data/truth.json"))
        .arg("--out")
        .arg(root.join("erc.json"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "erc failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let erc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("erc.json")).unwrap()).unwrap();
    let auc = erc["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn map_is_deterministic_and_overridable() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write(
        &root.join("dw.toml"),
        r#"
[model]
kind = "double-well"

[sampler]
budget = 1200
seed = 3

[output]
dir = "a"
"#,
    );
    let run = |outdir: &str, extra: &[&str]| {
        let out = elma()
            .args(["map", "--config"])
            .arg(root.join("dw.toml"))
            .args(["--set", &format!("output.dir={outdir}")])
            .args(extra)
            .arg("--allow-unconverged")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run("r1", &[]);
    run("r2", &[]);
    let a = std::fs::read(root.join("r1/elm.json")).unwrap();
    let b = std::fs::read(root.join("r2/elm.json")).unwrap();
    assert_eq!(a, b, "same config + seed must give byte-identical elm.json");

    // a flag override changes the config hash and the budget
    run("r3", &["--set", "sampler.budget=600"]);
    let c = std::fs::read(root.join("r3/elm.json")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // nonexistent config: I/O error
    let out = elma()
        .args(["map", "--config"])
        .arg(root.join("missing.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    // bad model kind: config error
    write(
        &root.join("bad.toml"),
        "[model]\nkind = \"nonsense\"\n\n[sampler]\nbudget = 10\nseed = 1\n",
    );
    let out = elma()
        .args(["map", "--config"])
        .arg(root.join("bad.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // bad CLI usage: config error
    let out = elma().args(["map"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    // --version exits 0
    let out = elma().arg("--version").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn bernoulli_and_bicluster_generation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let tf = serde_json::json!({
        "n": 8,
        "templates": ["11110000", "00001111"],
        "alphas": [0.5, 0.5],
        "flip_prob": 0.1,
    });
    write(&root.join("t.json"), &tf.to_string());
    let out = elma()
        .args(["generate", "bernoulli", "--templates"])
        .arg(root.join("t.json"))
        .args(["--m", "40", "--flip", "0.1", "--seed", "1", "--out"])
        .arg(root.join("bt"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ds: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("bt/dataset.json")).unwrap())
            .unwrap();
    assert_eq!(ds["points"].as_array().unwrap().len(), 40);

    let out = elma()
        .args([
            "generate",
            "bicluster",
            "--alts",
            "4",
            "--overlap",
            "1",
            "--noise",
            "0.02",
            "--obs",
            "300",
            "--seed",
            "3",
            "--out",
        ])
        .arg(root.join("bc"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("bc/matrix.csv").exists());
    assert!(root.join("bc/truth.json").exists());

    // a bernoulli map over that dataset runs end to end
    write(
        &root.join("bt.toml"),
        r#"
[model]
kind = "bernoulli"
dataset = "bt/dataset.json"
k = 2
flip_prob = 0.1

[sampler]
budget = 400
seed = 2

[output]
dir = "btout"
"#,
    );
    let out = elma()
        .args(["map", "--config"])
        .arg(root.join("bt.toml"))
        .arg("--allow-unconverged")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("btout/elm.json").exists());
}

#[test]
fn resume_continues_to_full_budget() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = |budget: u64, outdir: &str| {
        format!(
            r#"
[model]
kind = "double-well"

[sampler]
budget = {budget}
seed = 17

[output]
dir = "{outdir}"
"#
        )
    };
    // a full run in one go
    write(&root.join("full.toml"), &cfg(1000, "full"));
    let out = elma()
        .args(["map", "--config"])
        .arg(root.join("full.toml"))
        .arg("--allow-unconverged")
        .output()
        .unwrap();
    assert!(out.status.success());

    // the same run split in half via checkpoint resume
    write(&root.join("half.toml"), &cfg(500, "half"));
    let out = elma()
        .args(["map", "--config"])
        .arg(root.join("half.toml"))
        .arg("--allow-unconverged")
        .output()
        .unwrap();
    assert!(out.status.success());
    // resuming with a larger budget is allowed (budget and output dir are
    // excluded from the resume hash)
    write(&root.join("half2.toml"), &cfg(1000, "resumed"));
    let out = elma()
        .args(["map", "--config"])
        .arg(root.join("half2.toml"))
        .arg("--resume")
        .arg(root.join("half/checkpoint.json"))
        .arg("--allow-unconverged")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "resume failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let resumed: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(root.join("resumed/convergence.json")).unwrap(),
    )
    .unwrap();
    assert!(resumed["report"]["leaf_count_series"].as_array().is_some());

    // a different sampler parameter still rejects the checkpoint
    write(&root.join("other.toml"), &cfg(1000, "other").replace("seed = 17", "seed = 18"));
    let out = elma()
        .args(["map", "--config"])
        .arg(root.join("other.toml"))
        .arg("--resume")
        .arg(root.join("half/checkpoint.json"))
        .arg("--allow-unconverged")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
