use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_icl-lab"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn icl-lab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gradcheck_default_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("gradcheck.json");
    let o = run(&["gradcheck", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("seed"));
    let csv = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(csv.starts_with("seed,rel_error,h,d,K,N\n"));
    assert_eq!(csv.lines().count(), 101);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn gradcheck_coarse_step_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("gradcheck.json");
    let o = run(&[
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "h=1.0",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("truncation"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_exit_2() {
    let o = run(&["gradcheck", "--config", "/nonexistent/none.json", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_seed_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["concentration", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"));
}

#[test]
fn bad_override_is_exit_2() {
    let o = run(&["concentration", "--seed", "1", "--set", "prompts=\"many\""]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["concentration", "--seed", "1", "--set", "novalue"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn concentration_prints_rate_and_bound() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("concentration.json");
    let o = run(&["concentration", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("bound 0.8777"), "{out}");
    assert!(out.contains("empirical rate"));
}

#[test]
fn rerun_writes_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("concentration.json");
    let args = ["concentration", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()];
    assert_eq!(run(&args).status.code(), Some(0));
    let first = std::fs::read(dir.path().join("concentration.json")).unwrap();
    assert_eq!(run(&args).status.code(), Some(0));
    assert_eq!(first, std::fs::read(dir.path().join("concentration.json")).unwrap());
}

#[test]
fn zero_learning_rate_warns_and_reports_no_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("train.json");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "learning_rate=0",
        "--set",
        "max_epochs=20",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("T_star_hat absent"));
    assert!(stderr(&o).contains("warning"));
    let traj = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 21);
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn divergence_is_exit_1_with_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("train.json");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "divergence_threshold=1e-300",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epoch 0"), "{}", stderr(&o));
}

#[test]
fn train_writes_trajectory_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("train.json");
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "max_epochs=60",
        "--set",
        "stop_at_convergence=true",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seeds"]["seed"], 7);
    assert_eq!(manifest["feature_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["task_hash"].as_str().unwrap().len(), 64);
    for p in manifest["outputs"].as_array().unwrap() {
        assert!(Path::new(p.as_str().unwrap()).exists());
    }
}

#[test]
fn sweep_writes_layout_and_fits() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "sweep",
        "--seed",
        "5",
        "--workers",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "name=tiny",
        "--set",
        "grid.L=[0.3,0.5,0.8]",
        "--set",
        "grid.N=[400]",
        "--set",
        "repeats=3",
        "--set",
        "learning_rate=0.5",
        "--set",
        "max_epochs=2000",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("L exponent"), "{}", stdout(&o));
    let root = dir.path().join("tiny");
    let results = std::fs::read_to_string(root.join("results.csv")).unwrap();
    assert!(results.starts_with("L,Delta,K,N,eps,median_T,iqr,censored,eta\n"));
    assert_eq!(results.lines().count(), 4);
    let fits: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("fits.json")).unwrap()).unwrap();
    assert_eq!(fits[0]["variable"], "L");
    assert!(fits[0]["exponent"].as_f64().unwrap() < 0.0);
    let cells: Vec<_> = std::fs::read_dir(&root)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(cells.len(), 3);
    for c in cells {
        assert!(c.path().join("trajectory.csv").exists());
        assert!(c.path().join("manifest.json").exists());
    }
}

#[test]
fn fig1_default_writes_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("fig1.json");
    let o = run(&["fig1", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csvs = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("trajectory_L"))
        .count();
    assert_eq!(csvs, 6);
    for f in ["attention_scores.csv", "phases.json", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}
