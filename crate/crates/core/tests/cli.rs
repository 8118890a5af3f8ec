//! The `hcgnet` binary: exit codes, documents and golden files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_hcgnet");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares with a stored document; `HCGNET_BLESS=1` rewrites it.
fn check_golden(name: &str, got: &[u8]) {
    let path = golden(name);
    if std::env::var_os("HCGNET_BLESS").is_some() {
        std::fs::write(&path, got).unwrap();
    }
    let want = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(want == got, "{name} differs from the golden copy");
}

#[test]
fn preset_b_summary_is_within_tolerance() {
    let o = run(&["summarize", "--preset", "b", "--input", "224"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("target params 12.9M"));
    assert!(!text.contains("OUT OF TOLERANCE"));
}

#[test]
fn structured_and_text_totals_agree() {
    let s = run(&["summarize", "--preset", "b", "--format", "structured"]);
    let doc: serde_json::Value = serde_json::from_slice(&s.stdout).unwrap();
    let text = String::from_utf8(run(&["summarize", "--preset", "b"]).stdout).unwrap();
    let params = doc["totals"]["params"].as_u64().unwrap();
    let macs = doc["totals"]["macs"].as_u64().unwrap();
    assert!(text.contains(&format!("params     {params} ")));
    assert!(text.contains(&format!("macs       {macs} ")));
    let stages: Vec<&str> = doc["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(stages.iter().filter(|s| s.starts_with("block")).count(), 4);
    assert_eq!(stages.iter().filter(|s| s.starts_with("transition")).count(), 3);
}

#[test]
fn unknown_config_key_exits_two_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.cfg");
    std::fs::write(
        &path,
        "stem = \"cifar\"\nclasses = 10\ninput = 8\nblocks = [{ modules = 2, growth = 8 }]\n[transition]\ngamma = 2\n",
    )
    .unwrap();
    let o = run(&["summarize", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("transition.gamma"));
}

#[test]
fn indivisible_config_names_the_node() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("odd.toml");
    std::fs::write(
        &path,
        "stem = \"cifar\"\nclasses = 10\ninput = 8\nblocks = [{ modules = 2, growth = 6 }, { modules = 2, growth = 8 }]\n",
    )
    .unwrap();
    let o = run(&["export", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("block1.module1"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&["summarize", "--preset", "a1", "--config", "x.toml"])), 1);
    assert_eq!(code(&run(&["summarize", "--preset", "z9"])), 1);
    assert_eq!(code(&run(&["summarize", "--preset", "a1", "--bogus"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn ladder_underflow_exits_two() {
    let o = run(&["summarize", "--preset", "b", "--input", "7"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn flop_shortfall_exits_three() {
    let o = run(&["summarize", "--preset", "a1", "--tol-flops", "15"]);
    assert_eq!(code(&o), 3);
    let o = run(&["summarize", "--preset", "a1", "--tol-flops", "25"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn verify_a1_passes() {
    let o = run(&["verify", "--preset", "a1", "--seed", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = run(&["verify", "--preset", "a1", "--seed", "0", "--format", "structured"]);
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["checks"].as_array().unwrap().len(), 5);
}

#[test]
fn gradcheck_of_op_kinds_passes() {
    let o = run(&["gradcheck", "--target", "ops", "--format", "structured"]);
    assert_eq!(code(&o), 0);
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["passed"], true);
}

#[test]
fn out_flag_writes_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("graph.json");
    let o = run(&["export", "--preset", "a1", "--out", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());
    let stdout = run(&["export", "--preset", "a1"]).stdout;
    assert_eq!(std::fs::read(&path).unwrap(), stdout);
}

#[test]
fn a1_documents_match_golden_files() {
    let summary = run(&["summarize", "--preset", "a1", "--format", "structured"]);
    assert_eq!(code(&summary), 3);
    check_golden("a1_summary.json", &summary.stdout);
    let export = run(&["export", "--preset", "a1"]);
    assert_eq!(code(&export), 0);
    check_golden("a1_graph.json", &export.stdout);
}
