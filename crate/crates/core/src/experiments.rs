//! Parameter sweeps over (L, Δ, K, N, ε), log-log scaling fits and the
//! six-run training-dynamics bundle.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{make_features, FeatureMode, FeatureSet};
use crate::io::{feature_hash, fmt_f64, write_atomic, write_json, RunManifest};
use crate::model::AttentionState;
use crate::rng::derive_seed;
use crate::task::{TaskFamily, TaskSpec};
use crate::trainer::{detect_phases, train, PhaseConfig, PhaseReport, Regime, TrainConfig, TrajectoryLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variable {
    L,
    #[serde(rename = "Delta")]
    Delta,
    K,
    N,
    #[serde(rename = "eps")]
    Eps,
}

impl Variable {
    pub const ALL: [Variable; 5] = [Variable::L, Variable::Delta, Variable::K, Variable::N, Variable::Eps];

    pub fn name(self) -> &'static str {
        match self {
            Variable::L => "L",
            Variable::Delta => "Delta",
            Variable::K => "K",
            Variable::N => "N",
            Variable::Eps => "eps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "L" => Ok(Variable::L),
            "Delta" | "delta" | "Δ" => Ok(Variable::Delta),
            "K" => Ok(Variable::K),
            "N" => Ok(Variable::N),
            "eps" | "epsilon" | "ε" => Ok(Variable::Eps),
            _ => Err(Error::Config(format!("unknown sweep variable {s:?}"))),
        }
    }
}

impl std::fmt::Display for Variable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis values. Every axis must be nonempty; omitted axes take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    #[serde(rename = "L")]
    pub lipschitz: Vec<f64>,
    #[serde(rename = "Delta")]
    pub separation: Vec<f64>,
    #[serde(rename = "K")]
    pub features: Vec<usize>,
    #[serde(rename = "N")]
    pub len: Vec<usize>,
    #[serde(rename = "eps")]
    pub eps: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lipschitz: vec![0.5],
            separation: vec![3.0],
            features: vec![4],
            len: vec![2000],
            eps: vec![0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub name: String,
    pub grid: Grid,
    pub family: TaskFamily,
    pub mode: FeatureMode,
    /// Ambient dimension; raised to K when smaller.
    pub dim: usize,
    pub regime: Regime,
    pub repeats: usize,
    pub seed: u64,
    /// Shared η; `None` uses the per-cell default schedule.
    pub learning_rate: Option<f64>,
    pub max_epochs: usize,
    pub prompts_per_epoch: usize,
    pub eval_prompts: usize,
    pub delta: Option<f64>,
    pub noise_radius: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            name: "sweep".into(),
            grid: Grid::default(),
            family: TaskFamily::TwoLevel,
            mode: FeatureMode::Orthogonal,
            dim: 15,
            regime: Regime::Flat,
            repeats: 5,
            seed: 0,
            learning_rate: None,
            max_epochs: 5000,
            prompts_per_epoch: 300,
            eval_prompts: 200,
            delta: None,
            noise_radius: 0.0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.lipschitz.is_empty()
            || g.separation.is_empty()
            || g.features.is_empty()
            || g.len.is_empty()
            || g.eps.is_empty()
        {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        if g.lipschitz.iter().chain(&g.separation).chain(&g.eps).any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Config("L, Delta and eps values must be positive".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid sweep name {:?}", self.name)));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let g = &self.grid;
        let mut out = Vec::new();
        for &lipschitz in &g.lipschitz {
            for &separation in &g.separation {
                for &features in &g.features {
                    for &len in &g.len {
                        for &eps in &g.eps {
                            out.push(Cell {
                                lipschitz,
                                separation,
                                features,
                                len,
                                eps,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Variables with more than one grid value.
    pub fn varying(&self) -> Vec<Variable> {
        let g = &self.grid;
        let lens = [g.lipschitz.len(), g.separation.len(), g.features.len(), g.len.len(), g.eps.len()];
        Variable::ALL
            .into_iter()
            .zip(lens)
            .filter(|(_, n)| *n > 1)
            .map(|(v, _)| v)
            .collect()
    }

    fn train_config(&self, cell: &Cell, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            prompts_per_epoch: self.prompts_per_epoch,
            eps_target: cell.eps,
            delta: self.delta,
            eval_prompts: self.eval_prompts,
            prompt_len: cell.len,
            noise_radius: self.noise_radius,
            seed,
            regime: self.regime,
            stop_at_convergence: true,
            fixed_dataset: false,
            warm_start: false,
            divergence_threshold: 1e6,
        }
    }
}

/// One grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(rename = "L")]
    pub lipschitz: f64,
    #[serde(rename = "Delta")]
    pub separation: f64,
    #[serde(rename = "K")]
    pub features: usize,
    #[serde(rename = "N")]
    pub len: usize,
    pub eps: f64,
}

impl Cell {
    pub fn key(&self) -> String {
        format!(
            "L{}_D{}_K{}_N{}_e{}",
            self.lipschitz, self.separation, self.features, self.len, self.eps
        )
    }

    pub fn value(&self, v: Variable) -> f64 {
        match v {
            Variable::L => self.lipschitz,
            Variable::Delta => self.separation,
            Variable::K => self.features as f64,
            Variable::N => self.len as f64,
            Variable::Eps => self.eps,
        }
    }

    /// Seed for repeat `r`, a function of the base seed and the coordinates.
    pub fn seed(&self, base: u64, repeat: usize) -> u64 {
        derive_seed(
            base,
            &[
                self.lipschitz.to_bits(),
                self.separation.to_bits(),
                self.features as u64,
                self.len as u64,
                self.eps.to_bits(),
                repeat as u64,
            ],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    /// Convergence epoch per repeat; `None` when the run hit the epoch cap.
    pub times: Vec<Option<usize>>,
    /// Median over repeats, counting capped runs at the cap.
    pub median_t: f64,
    pub iqr: f64,
    /// Any repeat hit the cap.
    pub censored: bool,
    pub learning_rate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub name: String,
    pub max_epochs: usize,
    pub repeats: usize,
    pub varying: Vec<Variable>,
    pub cells: Vec<CellResult>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile range (linear interpolation).
pub fn median_iqr(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (quantile(&v, 0.5), quantile(&v, 0.75) - quantile(&v, 0.25))
}

struct RepeatOutcome {
    time: Option<usize>,
    learning_rate: f64,
    log: Option<TrajectoryLog>,
    features: Option<FeatureSet>,
    error: Option<String>,
}

fn run_repeat(spec: &SweepSpec, cell: &Cell, repeat: usize) -> RepeatOutcome {
    let seed = cell.seed(spec.seed, repeat);
    let attempt = || -> Result<(TrajectoryLog, FeatureSet)> {
        let dim = spec.dim.max(cell.features);
        let features = make_features(dim, cell.features, cell.separation, spec.mode, derive_seed(seed, &[1]))?;
        let task = TaskSpec::new(spec.family, cell.lipschitz);
        let cfg = spec.train_config(cell, derive_seed(seed, &[2]));
        let res = train(AttentionState::zeros(dim), &features, &task, &cfg)?;
        Ok((res.log, features))
    };
    match attempt() {
        Ok((log, features)) => RepeatOutcome {
            time: log.converged_at,
            learning_rate: log.learning_rate,
            log: Some(log),
            features: Some(features),
            error: None,
        },
        Err(e) => RepeatOutcome {
            time: None,
            learning_rate: spec.learning_rate.unwrap_or(f64::NAN),
            log: None,
            features: None,
            error: Some(format!("repeat {repeat}: {e}")),
        },
    }
}

/// Run every cell R times. Results come back in grid order regardless of
/// the worker count; with `out_dir` set, each cell writes its repeat-0
/// trajectory and a manifest under `<out_dir>/<name>/<cell-key>/`.
pub fn run_sweep(spec: &SweepSpec, out_dir: Option<&Path>) -> Result<SweepTable> {
    spec.validate()?;
    let cells = spec.cells();
    let results = cells
        .par_iter()
        .map(|cell| -> Result<CellResult> {
            let start = Instant::now();
            let outcomes: Vec<RepeatOutcome> = (0..spec.repeats).map(|r| run_repeat(spec, cell, r)).collect();
            let times: Vec<Option<usize>> = outcomes.iter().map(|o| o.time).collect();
            let as_f64: Vec<f64> = times
                .iter()
                .map(|t| t.map_or(spec.max_epochs as f64, |t| t as f64))
                .collect();
            let (median_t, iqr) = median_iqr(&as_f64);
            let errors: Vec<String> = outcomes.iter().filter_map(|o| o.error.clone()).collect();
            let result = CellResult {
                cell: *cell,
                censored: times.iter().any(Option::is_none),
                times,
                median_t,
                iqr,
                learning_rate: outcomes[0].learning_rate,
                errors,
            };
            if let Some(dir) = out_dir {
                write_cell(spec, &outcomes, &result, &dir.join(&spec.name), start)?;
            }
            Ok(result)
        })
        .collect::<Result<Vec<_>>>()?;
    let table = SweepTable {
        name: spec.name.clone(),
        max_epochs: spec.max_epochs,
        repeats: spec.repeats,
        varying: spec.varying(),
        cells: results,
    };
    if let Some(dir) = out_dir {
        let root = dir.join(&spec.name);
        write_atomic(&root.join("results.csv"), results_csv(&table).as_bytes())?;
    }
    Ok(table)
}

fn write_cell(
    spec: &SweepSpec,
    outcomes: &[RepeatOutcome],
    result: &CellResult,
    root: &Path,
    start: Instant,
) -> Result<()> {
    let cell_dir = root.join(result.cell.key());
    let mut manifest = RunManifest::new("sweep-cell", serde_json::to_value(result)?)
        .with_task(&TaskSpec::new(spec.family, result.cell.lipschitz))?;
    for r in 0..spec.repeats {
        manifest.seeds.insert(format!("repeat_{r}"), result.cell.seed(spec.seed, r));
    }
    if let Some(log) = &outcomes[0].log {
        let path = cell_dir.join("trajectory.csv");
        write_atomic(&path, log.to_csv().as_bytes())?;
        manifest.outputs.push(path.display().to_string());
    }
    manifest.feature_hash = outcomes[0].features.as_ref().map(feature_hash);
    manifest.failures = result.errors.clone();
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write(&cell_dir.join("manifest.json"))
}

/// Results table: cell columns, median_T, iqr, censored, eta.
pub fn results_csv(table: &SweepTable) -> String {
    let mut out = String::from("L,Delta,K,N,eps,median_T,iqr,censored,eta\n");
    for r in &table.cells {
        let c = &r.cell;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            fmt_f64(c.lipschitz),
            fmt_f64(c.separation),
            c.features,
            c.len,
            fmt_f64(c.eps),
            fmt_f64(r.median_t),
            fmt_f64(r.iqr),
            r.censored,
            fmt_f64(r.learning_rate)
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub value: f64,
    pub median_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub variable: Variable,
    pub exponent: f64,
    pub stderr: f64,
    pub r2: f64,
    pub cells: Vec<FitPoint>,
}

/// OLS of log(t) on log(x).
pub fn fit_loglog(variable: Variable, points: &[FitPoint]) -> Result<ScalingFit> {
    if points.len() < 3 {
        return Err(Error::Fit {
            variable: variable.to_string(),
            reason: format!("{} usable cells, need at least 3", points.len()),
        });
    }
    if points.iter().any(|p| !(p.value > 0.0) || !(p.median_t > 0.0)) {
        return Err(Error::Fit {
            variable: variable.to_string(),
            reason: "log fit needs positive values and times".into(),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.value.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.median_t.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-12 * n {
        return Err(Error::Fit {
            variable: variable.to_string(),
            reason: "rank-deficient design: all cells share one value".into(),
        });
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ssr: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum();
    let sst: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let stderr = (ssr / (n - 2.0) / sxx).sqrt();
    let r2 = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };
    if !slope.is_finite() {
        return Err(Error::Fit {
            variable: variable.to_string(),
            reason: "non-finite exponent".into(),
        });
    }
    Ok(ScalingFit {
        variable,
        exponent: slope,
        stderr,
        r2,
        cells: points.to_vec(),
    })
}

/// Fit median T against one variable using only uncensored cells. Every
/// other coordinate must be constant across the cells.
pub fn fit_scaling(table: &SweepTable, variable: Variable) -> Result<ScalingFit> {
    let fit_err = |reason: String| Error::Fit {
        variable: variable.to_string(),
        reason,
    };
    if table.repeats < 3 {
        return Err(fit_err(format!("{} repeats per cell, need at least 3", table.repeats)));
    }
    for other in Variable::ALL.into_iter().filter(|&v| v != variable) {
        let first = table.cells.first().map(|c| c.cell.value(other));
        if table.cells.iter().any(|c| Some(c.cell.value(other)) != first) {
            return Err(fit_err(format!("cells also vary in {other}")));
        }
    }
    let usable: Vec<FitPoint> = table
        .cells
        .iter()
        .filter(|c| !c.censored)
        .map(|c| FitPoint {
            value: c.cell.value(variable),
            median_t: c.median_t,
        })
        .collect();
    if usable.is_empty() {
        return Err(fit_err("every cell is censored".into()));
    }
    fit_loglog(variable, &usable)
}

/// Configuration of the six-run bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Fig1Config {
    #[serde(rename = "L")]
    pub lipschitz: Vec<f64>,
    pub family: TaskFamily,
    pub dim: usize,
    #[serde(rename = "K")]
    pub features: usize,
    #[serde(rename = "N")]
    pub len: usize,
    #[serde(rename = "Delta")]
    pub separation: f64,
    pub prompts_per_epoch: usize,
    pub epochs: usize,
    pub eval_prompts: usize,
    /// Shared η for every L.
    pub learning_rate: f64,
    pub eps_target: f64,
    pub seed: u64,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Self {
            lipschitz: vec![0.1, 0.2, 0.4, 1.0, 1.5, 2.0],
            family: TaskFamily::Exponential,
            dim: 15,
            features: 4,
            len: 100,
            separation: 3.0,
            prompts_per_epoch: 300,
            epochs: 400,
            eval_prompts: 200,
            learning_rate: 1.0,
            eps_target: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fig1Run {
    pub lipschitz: f64,
    pub log: TrajectoryLog,
    pub phases: PhaseReport,
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Fig1Bundle {
    pub runs: Vec<Fig1Run>,
    pub failures: Vec<String>,
    pub attention_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// Long-format attention table: for each L, epoch and query feature k, the
/// mean attention on v_1.
pub fn attention_scores_csv(runs: &[Fig1Run]) -> String {
    let mut out = String::from("L,t,query,attn_v1\n");
    for run in runs {
        for row in &run.log.rows {
            for k in 0..row.attn_matrix.nrows() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    fmt_f64(run.lipschitz),
                    row.epoch,
                    k + 1,
                    fmt_f64(row.attn_matrix[[k, 0]])
                ));
            }
        }
    }
    out
}

/// Train one model per L for the full horizon and write
/// `trajectory_L<L>.csv` per run, `attention_scores.csv`, `phases.json`
/// and `manifest.json` into `out_dir`.
pub fn reproduce_fig1(cfg: &Fig1Config, out_dir: &Path) -> Result<Fig1Bundle> {
    if cfg.lipschitz.is_empty() {
        return Err(Error::Config("fig1 needs at least one L value".into()));
    }
    let start = Instant::now();
    let features = make_features(
        cfg.dim,
        cfg.features,
        cfg.separation,
        FeatureMode::Orthogonal,
        derive_seed(cfg.seed, &[0]),
    )?;
    let outcomes: Vec<(f64, Result<TrajectoryLog>)> = cfg
        .lipschitz
        .par_iter()
        .enumerate()
        .map(|(i, &l)| {
            let tc = TrainConfig {
                learning_rate: Some(cfg.learning_rate),
                max_epochs: cfg.epochs,
                prompts_per_epoch: cfg.prompts_per_epoch,
                eps_target: cfg.eps_target,
                eval_prompts: cfg.eval_prompts,
                prompt_len: cfg.len,
                seed: derive_seed(cfg.seed, &[1, i as u64]),
                stop_at_convergence: false,
                ..TrainConfig::default()
            };
            let res = train(
                AttentionState::zeros(cfg.dim),
                &features,
                &TaskSpec::new(cfg.family, l),
                &tc,
            );
            (l, res.map(|r| r.log))
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut manifest = RunManifest::new("fig1", serde_json::to_value(cfg)?).with_task(&cfg.family)?;
    manifest.seeds.insert("seed".into(), cfg.seed);
    manifest.feature_hash = Some(feature_hash(&features));
    for (i, (l, res)) in outcomes.into_iter().enumerate() {
        manifest.seeds.insert(format!("L{l}"), derive_seed(cfg.seed, &[1, i as u64]));
        match res {
            Ok(log) => {
                let path = out_dir.join(format!("trajectory_L{l}.csv"));
                write_atomic(&path, log.to_csv().as_bytes())?;
                let phases = detect_phases(&log, &PhaseConfig::for_log(&log))?;
                manifest.outputs.push(path.display().to_string());
                runs.push(Fig1Run {
                    lipschitz: l,
                    log,
                    phases,
                    path,
                });
            }
            Err(e) => failures.push(format!("L={l}: {e}")),
        }
    }
    let attention_path = out_dir.join("attention_scores.csv");
    write_atomic(&attention_path, attention_scores_csv(&runs).as_bytes())?;
    let phases: Vec<serde_json::Value> = runs
        .iter()
        .map(|r| serde_json::json!({ "L": r.lipschitz, "phases": r.phases }))
        .collect();
    let phases_path = out_dir.join("phases.json");
    write_json(&phases_path, &phases)?;
    manifest.outputs.push(attention_path.display().to_string());
    manifest.outputs.push(phases_path.display().to_string());
    manifest.failures = failures.clone();
    manifest.duration_secs = start.elapsed().as_secs_f64();
    let manifest_path = out_dir.join("manifest.json");
    manifest.write(&manifest_path)?;
    Ok(Fig1Bundle {
        runs,
        failures,
        attention_path,
        manifest_path,
    })
}
