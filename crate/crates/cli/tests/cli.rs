use std::path::Path;
use std::process::{Command, Output};

fn umm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_umm-sim")).args(args).current_dir(dir).env_remove("UMM_OUTPUT_DIR").output().unwrap()
}

const SMALL: &str = "[run]\nscenario = \"delivery\"\nlabel = \"small\"\nseeds = [3, 4]\noverlay_sizes = [24]\n\n\
[topology]\nhosts = 48\n\n[churn]\nmedian_lifetime = 150.0\n\n[delivery]\nwarmup = 120.0\nmeasure = 120.0\n";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn check_validates_without_writing() {
    let dir = setup();
    let o = umm(dir.path(), &["run", "small.toml", "--check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!dir.path().join("umm-out").exists());
}

#[test]
fn config_errors_exit_3() {
    let dir = setup();
    for extra in ["--overlay.max_initiated=zero", "--no_such_key=1", "--run.overlay_sizes=[500]"] {
        let o = umm(dir.path(), &["run", "small.toml", "--check", extra]);
        assert_eq!(o.status.code(), Some(3), "{extra}: {}", stderr(&o));
        assert!(stderr(&o).contains("error"));
    }
    std::fs::write(dir.path().join("bad.toml"), "[run\nseeds = 1").unwrap();
    assert_eq!(umm(dir.path(), &["run", "bad.toml"]).status.code(), Some(3));
}

#[test]
fn override_errors_name_the_override() {
    let dir = setup();
    let o = umm(dir.path(), &["run", "small.toml", "--check", "--churn.rejoin_delay=soon"]);
    assert!(stderr(&o).contains("churn.rejoin_delay=soon"), "{}", stderr(&o));
}

#[test]
fn missing_config_exits_5() {
    let dir = setup();
    assert_eq!(umm(dir.path(), &["run", "nowhere.toml"]).status.code(), Some(5));
}

#[test]
fn usage_errors_exit_2() {
    let dir = setup();
    assert_eq!(umm(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(umm(dir.path(), &["run"]).status.code(), Some(2));
}

#[test]
fn run_writes_csv_and_summary_and_reruns_identically() {
    let dir = setup();
    let o = umm(dir.path(), &["run", "small.toml", "--jobs", "2", "--run.output_dir=a"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = umm(dir.path(), &["run", "small.toml", "--run.output_dir=b", "--trace"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for seed in [3, 4] {
        let name = format!("small-n24-s{seed}.csv");
        let a = std::fs::read_to_string(dir.path().join("a").join(&name)).unwrap();
        let b = std::fs::read_to_string(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("scenario,seed,overlay_size,metric,statistic,value\n"));
        assert!(a.lines().any(|l| l.starts_with(&format!("small,{seed},24,delivery,ratio,"))), "{a}");
        assert!(dir.path().join("b").join(format!("small-n24-s{seed}.trace.tsv")).exists());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/small-summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 2);
    assert_eq!(summary["metrics"]["delivery"]["ratio"]["runs"], 2);
    let sa = std::fs::read_to_string(dir.path().join("a/small-summary.json")).unwrap();
    let sb = std::fs::read_to_string(dir.path().join("b/small-summary.json")).unwrap();
    assert_eq!(sa, sb);
}

#[test]
fn output_dir_comes_from_the_environment() {
    let dir = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_umm-sim"))
        .args(["run", "small.toml", "--run.seeds=[3]", "--delivery.measure=30.0"])
        .current_dir(dir.path())
        .env("UMM_OUTPUT_DIR", "from-env")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("from-env/small-n24-s3.csv").exists());
}

#[test]
fn compare_reports_deltas_and_missing_metrics() {
    let dir = setup();
    let o = umm(dir.path(), &["run", "small.toml", "--run.output_dir=a", "--run.seeds=[3]"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = umm(dir.path(), &["compare", "a/small-summary.json", "a/small-summary.json", "--out", "same.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let same: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("same.json")).unwrap()).unwrap();
    let deltas = same["deltas"].as_array().unwrap();
    assert!(!deltas.is_empty());
    assert!(deltas.iter().all(|d| d["delta"] == 0.0));

    let mut trimmed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/small-summary.json")).unwrap()).unwrap();
    trimmed["metrics"].as_object_mut().unwrap().remove("delivery");
    std::fs::write(dir.path().join("trimmed.json"), trimmed.to_string()).unwrap();
    let o = umm(dir.path(), &["compare", "a/small-summary.json", "trimmed.json", "--out", "diff.json"]);
    assert_eq!(o.status.code(), Some(0));
    let diff: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("diff.json")).unwrap()).unwrap();
    assert!(diff["only_in_a"].as_array().unwrap().iter().any(|m| m.as_str().unwrap().starts_with("delivery.")));

    assert_eq!(umm(dir.path(), &["compare", "a/small-summary.json", "gone.json"]).status.code(), Some(5));
}
