use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn dnc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dnc"))
        .args(args)
        .current_dir(workspace())
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn toy_pipeline_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    let out = out.to_str().unwrap();
    let base = ["--config", "data/toy.toml", "--out-dir", out];

    let o = dnc(&[&base[..], &["divide", "--fine-bins"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("20 questions, 100 records"), "{text}");
    assert!(text.contains("low_bottom"), "{text}");

    let o = dnc(&[&base[..], &["conquer"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("fcr-sc:"), "{}", stdout(&o));

    let o = dnc(&[&base[..], &["conquer", "--strategy", "com2", "--subsets", "low"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = dnc(&[&base[..], &["report", "--replay"]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("0 fetches, outputs identical"), "{}", stdout(&o));

    let summary = std::fs::read_to_string(dir.path().join("toy/summary.csv")).unwrap();
    assert!(summary.starts_with("dataset,subset,strategy,self_consistency,n,correct,accuracy"));
    assert!(summary.contains(",com2-sc,"), "{summary}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("toy/report.json")).unwrap()).unwrap();
    assert_eq!(report["partial"], false);
    assert_eq!(report["conquer"].as_array().unwrap().len(), 2);

    let o = dnc(&["report", "--compare", out, out]);
    assert!(o.status.success());
}

#[test]
fn simulate_prints_assertion_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = dnc(&["--out-dir", out.to_str().unwrap(), "--seed", "5", "simulate", "--profile", "data/sim_certain.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("PASS share of high"), "{}", stdout(&o));
}

#[test]
fn failed_assertions_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let profile = dir.path().join("impossible.json");
    std::fs::write(
        &profile,
        r#"{"generator": {"n": 20, "family": {"family": "certain"}},
            "assertions": [{"kind": "subset_share", "subset": "low", "min": 0.5}]}"#,
    )
    .unwrap();
    let out = dir.path().join("sim");
    let o = dnc(&["--out-dir", out.to_str().unwrap(), "simulate", "--profile", profile.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL share of low"), "{}", stdout(&o));
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let o = dnc(&["--config", "data/toy.toml", "--out-dir", out, "divide", "--mu", "0.5", "--nu", "0.7"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nu must be smaller than mu"));

    let o = dnc(&["--out-dir", out, "divide", "--dataset", "data/missing.jsonl", "--profiles", "data/toy_profiles.json"]);
    assert_eq!(o.status.code(), Some(1));

    let o = dnc(&["--out-dir", out, "conquer"]);
    assert_eq!(o.status.code(), Some(1), "conquer before divide");
}

#[test]
fn unreachable_endpoint_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("http.toml");
    std::fs::write(
        &cfg,
        r#"
        [dataset]
        path = "data/toy.jsonl"
        [backend]
        kind = "http"
        endpoint = "http://127.0.0.1:9/v1/chat/completions"
        model = "test-model"
        api_key_env = "DNC_TEST_KEY"
        max_attempts = 1
        timeout_secs = 2
        "#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_dnc"))
        .args(["--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "divide"])
        .current_dir(workspace())
        .env("DNC_TEST_KEY", "not-a-real-key")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(!manifest.contains("not-a-real-key"));
}
