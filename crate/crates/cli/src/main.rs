use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use icl_lab::experiments::{fit_scaling, reproduce_fig1, run_sweep, Fig1Config, SweepSpec, Variable};
use icl_lab::gradcheck::{gradcheck_sweep, GradCheckConfig};
use icl_lab::io::{feature_hash, write_atomic, write_json, RunManifest};
use icl_lab::prompt::{concentration_study, default_delta};
use icl_lab::trainer::{detect_phases, train, PhaseConfig, TrainConfig};
use icl_lab::{make_features, AttentionState, Error, FeatureMode, TaskSpec};

#[derive(Parser)]
#[command(name = "icl-lab", version, about = "Softmax-attention in-context learning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients with central differences on random instances.
    Gradcheck(Common),
    /// Train one model and write its trajectory.
    Train(Common),
    /// Run a parameter sweep and fit scaling exponents.
    Sweep(Common),
    /// Measure concentration-set membership against its bound.
    Concentration(Common),
    /// Write the six-run training-dynamics bundle.
    Fig1(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration document.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Top-level seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps and multi-run commands.
    #[arg(long)]
    workers: Option<usize>,
    /// Override a config key, e.g. `--set grid.L=[0.1,0.2]`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

/// Usage or configuration problem; maps to exit code 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Check failed; maps to exit code 1 after the summary has been printed.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn set_path(root: &mut Value, path: &str, value: Value) -> anyhow::Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(config_err(format!("empty segment in key {path:?}")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_err(format!("{path:?}: parent of {part:?} is not an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Load the JSON document, apply `--set` and `--seed`, and require a seed.
fn resolve_config(common: &Common) -> anyhow::Result<Value> {
    let mut doc = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| config_err(format!("invalid JSON in {}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(config_err("config must be a JSON object"));
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| config_err(format!("override {o:?} is not PATH=VALUE")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_path(&mut doc, k, value)?;
    }
    if let Some(s) = common.seed {
        set_path(&mut doc, "seed", Value::from(s))?;
    }
    match doc.get("seed") {
        Some(Value::Number(n)) if n.is_u64() => Ok(doc),
        Some(_) => Err(config_err("seed must be a non-negative integer")),
        None => Err(config_err("no seed given: set `seed` in the config or pass --seed")),
    }
}

fn parse<T: for<'de> Deserialize<'de>>(doc: &Value) -> anyhow::Result<T> {
    serde_json::from_value(doc.clone()).map_err(|e| config_err(format!("config: {e}")))
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_gradcheck(common: &Common) -> anyhow::Result<()> {
    let doc = resolve_config(common)?;
    let cfg: GradCheckConfig = parse(&doc)?;
    let start = Instant::now();
    let report = gradcheck_sweep(&cfg)?;
    let out = out_dir(common, "gradcheck");
    let csv = out.join("gradcheck.csv");
    write_atomic(&csv, report.to_csv().as_bytes())?;
    let mut manifest = RunManifest::new("gradcheck", serde_json::to_value(cfg)?);
    manifest.seeds.insert("seed".into(), cfg.seed);
    manifest.outputs.push(path_str(&csv));
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write(&out.join("manifest.json"))?;
    let worst = report.worst().ok_or_else(|| config_err("instances must be positive"))?;
    println!(
        "gradcheck: {} instances, max rel error {:.3e} (seed {}, d={}, K={}, N={}), tolerance {:.1e}",
        report.rows.len(),
        worst.rel_error,
        worst.seed,
        worst.d,
        worst.k,
        worst.n,
        report.tolerance
    );
    if !report.passed() {
        let hint = if cfg.h > 1e-3 {
            format!("; step h = {} gives O(h²) truncation error, try h ≈ 1e-5", cfg.h)
        } else {
            String::new()
        };
        return Err(CheckFailed(format!("gradient check failed{hint}")).into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
struct FeatureConfig {
    dim: usize,
    #[serde(rename = "K")]
    count: usize,
    #[serde(rename = "Delta")]
    separation: f64,
    mode: FeatureMode,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            dim: 15,
            count: 4,
            separation: 3.0,
            mode: FeatureMode::Orthogonal,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainCommand {
    #[serde(default)]
    features: FeatureConfig,
    task: TaskSpec,
    #[serde(flatten)]
    train: TrainConfig,
}

fn cmd_train(common: &Common) -> anyhow::Result<()> {
    let doc = resolve_config(common)?;
    let cfg: TrainCommand = parse(&doc)?;
    let start = Instant::now();
    let f = cfg.features;
    let features = make_features(f.dim, f.count, f.separation, f.mode, cfg.train.seed)?;
    if cfg.train.learning_rate == Some(0.0) {
        eprintln!("warning: learning rate is 0, Q will not move");
    }
    let res = train(AttentionState::zeros(f.dim), &features, &cfg.task, &cfg.train)?;
    let out = out_dir(common, "train");
    let traj = out.join("trajectory.csv");
    write_atomic(&traj, res.log.to_csv().as_bytes())?;
    let phases = detect_phases(&res.log, &PhaseConfig::for_log(&res.log))?;
    let phases_path = out.join("phases.json");
    write_json(&phases_path, &phases)?;
    let mut manifest = RunManifest::new("train", serde_json::to_value(&cfg)?).with_task(&cfg.task)?;
    manifest.seeds.insert("seed".into(), cfg.train.seed);
    manifest.feature_hash = Some(feature_hash(&features));
    manifest.outputs = vec![path_str(&traj), path_str(&phases_path)];
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write(&out.join("manifest.json"))?;
    let t_star = res
        .log
        .converged_at
        .map_or_else(|| "absent".to_string(), |t| t.to_string());
    println!(
        "train: {} epochs, eta {:.4e}, regime {:?}, T_star_hat {t_star}",
        res.log.rows.len(),
        res.log.learning_rate,
        res.log.regime
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SweepCommand {
    #[serde(flatten)]
    spec: SweepSpec,
    /// Variables to fit; defaults to every axis with more than one value.
    #[serde(default)]
    fit: Option<Vec<Variable>>,
}

fn cmd_sweep(common: &Common) -> anyhow::Result<()> {
    let doc = resolve_config(common)?;
    let cfg: SweepCommand = parse(&doc)?;
    let start = Instant::now();
    let out = out_dir(common, "sweeps");
    let table = run_sweep(&cfg.spec, Some(&out))?;
    let root = out.join(&cfg.spec.name);
    let vars = cfg.fit.clone().unwrap_or_else(|| table.varying.clone());
    let mut fits = Vec::new();
    let mut summary = Vec::new();
    for v in vars {
        match fit_scaling(&table, v) {
            Ok(fit) => {
                summary.push(format!("{v} exponent {:.3} ± {:.3}", fit.exponent, fit.stderr));
                fits.push(serde_json::to_value(&fit)?);
            }
            Err(e) => {
                eprintln!("fit for {v} aborted: {e}");
                summary.push(format!("{v} fit aborted"));
                fits.push(serde_json::json!({ "variable": v, "error": e.to_string() }));
            }
        }
    }
    let fits_path = root.join("fits.json");
    write_json(&fits_path, &fits)?;
    let mut manifest = RunManifest::new("sweep", serde_json::to_value(&cfg)?).with_task(&cfg.spec.family)?;
    manifest.seeds.insert("seed".into(), cfg.spec.seed);
    manifest.outputs = vec![path_str(&root.join("results.csv")), path_str(&fits_path)];
    manifest.failures = table.cells.iter().flat_map(|c| c.errors.clone()).collect();
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write(&root.join("manifest.json"))?;
    let censored = table.cells.iter().filter(|c| c.censored).count();
    println!(
        "sweep {}: {} cells ({censored} censored); {}",
        table.name,
        table.cells.len(),
        if summary.is_empty() { "no fits".to_string() } else { summary.join("; ") }
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
struct ConcentrationCommand {
    seed: u64,
    dim: usize,
    #[serde(rename = "K")]
    count: usize,
    #[serde(rename = "N")]
    len: usize,
    #[serde(rename = "Delta")]
    separation: f64,
    /// δ; defaults to √(20K/N).
    delta: Option<f64>,
    prompts: usize,
}

impl Default for ConcentrationCommand {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 15,
            count: 4,
            len: 100,
            separation: 3.0,
            delta: None,
            prompts: 10_000,
        }
    }
}

fn cmd_concentration(common: &Common) -> anyhow::Result<()> {
    let doc = resolve_config(common)?;
    let cfg: ConcentrationCommand = parse(&doc)?;
    let start = Instant::now();
    let features = make_features(cfg.dim, cfg.count, cfg.separation, FeatureMode::Orthogonal, cfg.seed)?;
    let delta = cfg.delta.unwrap_or_else(|| default_delta(cfg.count, cfg.len));
    let study = concentration_study(&features, cfg.len, delta, cfg.prompts, cfg.seed)?;
    let out = out_dir(common, "concentration");
    let path = out.join("concentration.json");
    write_json(&path, &study)?;
    let mut manifest = RunManifest::new("concentration", serde_json::to_value(cfg)?);
    manifest.seeds.insert("seed".into(), cfg.seed);
    manifest.feature_hash = Some(feature_hash(&features));
    manifest.outputs.push(path_str(&path));
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write(&out.join("manifest.json"))?;
    println!(
        "concentration: delta {:.4}, N {}, {} prompts, empirical rate {:.4}, bound {:.4}",
        delta, cfg.len, cfg.prompts, study.frequency, study.bound
    );
    if !study.satisfies_bound() {
        return Err(CheckFailed(format!(
            "membership rate {:.4} below bound {:.4} minus allowance {:.4}",
            study.frequency, study.bound, study.allowance
        ))
        .into());
    }
    Ok(())
}

fn cmd_fig1(common: &Common) -> anyhow::Result<()> {
    let doc = resolve_config(common)?;
    let cfg: Fig1Config = parse(&doc)?;
    let out = out_dir(common, "fig1");
    let bundle = reproduce_fig1(&cfg, &out)?;
    for f in &bundle.failures {
        eprintln!("fig1 run failed: {f}");
    }
    let finals: Vec<String> = bundle
        .runs
        .iter()
        .map(|r| {
            let last = r.log.rows.last().map_or(f64::NAN, |row| 1.0 - row.attn[0]);
            format!("L={} 1-Attn_1={:.3}", r.lipschitz, last)
        })
        .collect();
    println!(
        "fig1: {} trajectories in {}; {}",
        bundle.runs.len(),
        out.display(),
        finals.join(", ")
    );
    if !bundle.failures.is_empty() {
        return Err(CheckFailed(format!("{} runs failed", bundle.failures.len())).into());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::Json(_)) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = match &cli.command {
        Command::Gradcheck(c)
        | Command::Train(c)
        | Command::Sweep(c)
        | Command::Concentration(c)
        | Command::Fig1(c) => c.clone(),
    };
    if let Some(n) = common.workers {
        if n == 0 {
            bail!(config_err("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    match cli.command {
        Command::Gradcheck(_) => cmd_gradcheck(&common),
        Command::Train(_) => cmd_train(&common).context("train"),
        Command::Sweep(_) => cmd_sweep(&common).context("sweep"),
        Command::Concentration(_) => cmd_concentration(&common),
        Command::Fig1(_) => cmd_fig1(&common).context("fig1"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(Error::Divergence { epoch, .. }) = e.downcast_ref::<Error>() {
                eprintln!("error: diverged at epoch {epoch}; try a smaller learning rate");
            }
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
