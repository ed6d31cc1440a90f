//! Monte-Carlo gradient descent on Q with per-epoch trajectory logging,
//! attention-based convergence detection and phase segmentation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::grad::{
    draw_population_samples, population_grad_on, population_grad_tokens, PopulationGradEstimate,
};
use crate::io::fmt_f64;
use crate::model::{bilinear_weights, forward, forward_classes, AttentionState};
use crate::prompt::{
    default_delta, in_concentration_set, perturb_feature, sample_prompt_rng, GroupedPrompt, Prompt,
};
use crate::rng::{categorical, derive_seed, multinomial_counts, rng_from_seed, Rng};
use crate::task::{TaskFunction, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Flat,
    Sharp,
    Auto,
}

/// Threshold 1/(Δδ) separating the flat and sharp L-regimes.
pub fn regime_threshold(separation: f64, delta: f64) -> f64 {
    1.0 / (separation * delta)
}

pub fn resolve_regime(hint: Regime, lipschitz: f64, separation: f64, delta: f64) -> Regime {
    match hint {
        Regime::Auto if lipschitz < regime_threshold(separation, delta) => Regime::Flat,
        Regime::Auto => Regime::Sharp,
        r => r,
    }
}

/// Default step: 0.1·K/(L²Δ²) (flat) or 0.1·K·ε/(L²Δ²) (sharp).
pub fn default_learning_rate(regime: Regime, k: usize, lipschitz: f64, separation: f64, eps: f64) -> f64 {
    let base = 0.1 * k as f64 / (lipschitz * lipschitz * separation * separation);
    match regime {
        Regime::Sharp => base * eps,
        _ => base,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// η; `None` selects the regime schedule.
    pub learning_rate: Option<f64>,
    pub max_epochs: usize,
    /// Fresh prompts per epoch for the gradient estimate.
    pub prompts_per_epoch: usize,
    pub eps_target: f64,
    /// δ for phase thresholds and concentration; `None` means √(20K/N).
    pub delta: Option<f64>,
    /// Prompts per feature for the Attn_k|query=k estimate.
    pub eval_prompts: usize,
    pub prompt_len: usize,
    pub noise_radius: f64,
    pub seed: u64,
    pub regime: Regime,
    pub stop_at_convergence: bool,
    /// Reuse the epoch-0 training draws every epoch.
    pub fixed_dataset: bool,
    pub warm_start: bool,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: None,
            max_epochs: 400,
            prompts_per_epoch: 300,
            eps_target: 0.05,
            delta: None,
            eval_prompts: 200,
            prompt_len: 100,
            noise_radius: 0.0,
            seed: 0,
            regime: Regime::Auto,
            stop_at_convergence: true,
            fixed_dataset: false,
            warm_start: false,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.eps_target > 0.0 && self.eps_target < 1.0) {
            return Err(Error::Config(format!("eps_target {} must lie in (0,1)", self.eps_target)));
        }
        if let Some(eta) = self.learning_rate {
            if !(eta >= 0.0) || !eta.is_finite() {
                return Err(Error::Config(format!("learning rate {eta} invalid")));
            }
        }
        if self.max_epochs == 0 || self.prompts_per_epoch == 0 || self.eval_prompts == 0 {
            return Err(Error::Config(
                "max_epochs, prompts_per_epoch and eval_prompts must be positive".into(),
            ));
        }
        if self.prompt_len < k {
            return Err(Error::Config(format!(
                "prompt length {} must be at least K = {k}",
                self.prompt_len
            )));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0) {
                return Err(Error::Config(format!("delta {d} must be positive")));
            }
        }
        Ok(())
    }

    pub fn delta_for(&self, k: usize) -> f64 {
        self.delta.unwrap_or_else(|| default_delta(k, self.prompt_len))
    }
}

/// One epoch of the trajectory, describing Q^(t) before the t-th update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub loss: f64,
    /// Attn_k | x_query = v_k.
    pub attn: Vec<f64>,
    /// (k, m): mean Attn_m | x_query = v_k.
    pub attn_matrix: Array2<f64>,
    /// q_{k,k'}.
    pub bilinear: Array2<f64>,
    /// Population mean of 1{query = k}·g^cls_m.
    pub g: Array2<f64>,
    pub g_std_err: Array2<f64>,
    pub conc_rate: f64,
}

impl TrajectoryRow {
    pub fn q_diag(&self, k: usize) -> f64 {
        self.bilinear[[k, k]]
    }

    pub fn max_offdiag_g(&self) -> f64 {
        let k = self.g.nrows();
        let mut best = 0.0f64;
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    best = best.max(self.g[[a, b]].abs());
                }
            }
        }
        best
    }

    pub fn worst_gap(&self) -> f64 {
        self.attn.iter().map(|a| 1.0 - a).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub feature_count: usize,
    pub rows: Vec<TrajectoryRow>,
    pub learning_rate: f64,
    pub delta: f64,
    pub eps_target: f64,
    pub regime: Regime,
    /// First epoch whose row meets the attention criterion.
    pub converged_at: Option<usize>,
}

impl TrajectoryLog {
    pub fn csv_header(k: usize) -> String {
        let mut cols = vec!["t".to_string(), "loss".to_string()];
        cols.extend((1..=k).map(|a| format!("Attn_{a}")));
        for a in 1..=k {
            for b in 1..=k {
                cols.push(format!("q_{a}_{b}"));
            }
        }
        cols.extend((1..=k).map(|a| format!("g_{a}")));
        cols.push("max_offdiag_g".into());
        cols.push("conc_rate".into());
        cols.join(",")
    }

    /// Fixed column order: t, loss, Attn_1..Attn_K, q_{k,k'} row-major,
    /// g_1..g_K, max_offdiag_g, conc_rate.
    pub fn to_csv(&self) -> String {
        let k = self.feature_count;
        let mut out = Self::csv_header(k);
        out.push('\n');
        for r in &self.rows {
            let mut f = vec![r.epoch.to_string(), fmt_f64(r.loss)];
            f.extend(r.attn.iter().map(|&x| fmt_f64(x)));
            f.extend(r.bilinear.iter().map(|&x| fmt_f64(x)));
            f.extend((0..k).map(|a| fmt_f64(r.g[[a, a]])));
            f.push(fmt_f64(r.max_offdiag_g()));
            f.push(fmt_f64(r.conc_rate));
            out.push_str(&f.join(","));
            out.push('\n');
        }
        out
    }
}

/// A trajectory CSV read back into columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrajectory {
    pub feature_count: usize,
    pub epochs: Vec<usize>,
    pub loss: Vec<f64>,
    pub attn: Vec<Vec<f64>>,
    pub bilinear: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub max_offdiag_g: Vec<f64>,
    pub conc_rate: Vec<f64>,
}

/// Parse and validate a trajectory CSV (header layout, strictly increasing
/// epochs, finite entries).
pub fn parse_trajectory_csv(text: &str) -> Result<ParsedTrajectory> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let n = header.len();
    // columns = 2 + K + K² + K + 2
    let k = (1..=64)
        .find(|&k| 2 * k + k * k + 4 == n)
        .ok_or_else(|| Error::Format(format!("{n} columns do not match any feature count")))?;
    let expected = TrajectoryLog::csv_header(k);
    if header.join(",") != expected {
        let bad = header
            .iter()
            .zip(expected.split(','))
            .find(|(a, b)| a.as_str() != *b)
            .map(|(a, _)| a.clone())
            .unwrap_or_default();
        return Err(Error::Format(format!("unexpected column {bad:?}")));
    }
    let mut p = ParsedTrajectory {
        feature_count: k,
        epochs: Vec::new(),
        loss: Vec::new(),
        attn: Vec::new(),
        bilinear: Vec::new(),
        g: Vec::new(),
        max_offdiag_g: Vec::new(),
        conc_rate: Vec::new(),
    };
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != n {
            return Err(Error::Format(format!("row {line} has {} fields", rec.len())));
        }
        let t: usize = rec[0]
            .parse()
            .map_err(|_| Error::Format(format!("row {line}: bad epoch {:?}", &rec[0])))?;
        if p.epochs.last().is_some_and(|&prev| t <= prev) {
            return Err(Error::Format(format!("row {line}: epochs not strictly increasing")));
        }
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Format(format!("row {line}: non-finite value {s:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        p.epochs.push(t);
        p.loss.push(vals[0]);
        p.attn.push(vals[1..1 + k].to_vec());
        p.bilinear.push(vals[1 + k..1 + k + k * k].to_vec());
        p.g.push(vals[1 + k + k * k..1 + 2 * k + k * k].to_vec());
        p.max_offdiag_g.push(vals[1 + 2 * k + k * k]);
        p.conc_rate.push(vals[2 + 2 * k + k * k]);
    }
    if p.epochs.is_empty() {
        return Err(Error::Format("trajectory has no rows".into()));
    }
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub state: AttentionState,
    pub log: TrajectoryLog,
}

enum Batch {
    Grouped(Vec<GroupedPrompt>),
    Tokens(Vec<Prompt>),
}

fn draw_batch(
    features: &FeatureSet,
    task: &TaskSpec,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Batch> {
    if cfg.noise_radius == 0.0 {
        Ok(Batch::Grouped(draw_population_samples(
            features,
            task,
            cfg.prompt_len,
            cfg.prompts_per_epoch,
            rng,
        )?))
    } else {
        let prompts = (0..cfg.prompts_per_epoch)
            .map(|_| {
                let t = task.sample(features, rng)?;
                sample_prompt_rng(features, &t, cfg.prompt_len, cfg.noise_radius, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch::Tokens(prompts))
    }
}

impl Batch {
    fn estimate(&self, state: &AttentionState, features: &FeatureSet) -> Result<PopulationGradEstimate> {
        match self {
            Batch::Grouped(s) => population_grad_on(state, features, s),
            Batch::Tokens(p) => population_grad_tokens(state, features, p),
        }
    }

    fn concentration_rate(&self, probs: &[f64], delta: f64) -> f64 {
        let (hits, total) = match self {
            Batch::Grouped(s) => (
                s.iter().filter(|p| in_concentration_set(&p.counts, probs, delta)).count(),
                s.len(),
            ),
            Batch::Tokens(p) => (
                p.iter().filter(|p| in_concentration_set(&p.counts, probs, delta)).count(),
                p.len(),
            ),
        };
        hits as f64 / total as f64
    }
}

/// Mean attention matrix: row k holds E[Attn_m | x_query = v_k] over
/// `per_feature` fresh prompts.
pub fn attention_matrix(
    state: &AttentionState,
    features: &FeatureSet,
    len: usize,
    noise_radius: f64,
    per_feature: usize,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    let k = features.count();
    let probs = features.probs_f64();
    let mut out = Array2::zeros((k, k));
    if noise_radius == 0.0 {
        let bil = bilinear_weights(state, features)?;
        let zeros = vec![0.0; k];
        for q in 0..k {
            let row = bil.row(q);
            let row = row.as_slice().expect("contiguous row");
            for _ in 0..per_feature {
                let gp = GroupedPrompt {
                    counts: multinomial_counts(rng, len, probs),
                    query_feature: q,
                    values: zeros.clone(),
                    query_label: 0.0,
                };
                let out_c = forward_classes(row, state.value(), &gp)?;
                for (m, a) in out_c.feature_scores.iter().enumerate() {
                    out[[q, m]] += a;
                }
            }
        }
    } else {
        let d = features.dim();
        for q in 0..k {
            for _ in 0..per_feature {
                let token_features: Vec<usize> = (0..len).map(|_| categorical(rng, probs)).collect();
                let mut inputs = Array2::zeros((len, d));
                let mut counts = vec![0usize; k];
                for (i, &f) in token_features.iter().enumerate() {
                    inputs.row_mut(i).assign(&perturb_feature(features, f, noise_radius, rng));
                    counts[f] += 1;
                }
                let p = Prompt {
                    inputs,
                    responses: ndarray::Array1::zeros(len),
                    query: perturb_feature(features, q, noise_radius, rng),
                    query_label: 0.0,
                    query_feature: q,
                    token_features,
                    counts,
                    noise_radius,
                };
                let o = forward(state, &p)?;
                for (m, a) in o.feature_scores.iter().enumerate() {
                    out[[q, m]] += a;
                }
            }
        }
    }
    out /= per_feature as f64;
    Ok(out)
}

fn as_divergence(e: Error, epoch: usize) -> Error {
    match e {
        Error::NumericOverflow { .. } | Error::NonFiniteGradient { .. } => Error::Divergence {
            epoch,
            last_stable: epoch.checked_sub(1),
            loss: f64::NAN,
        },
        e => e,
    }
}

/// Run Monte-Carlo GD: each epoch estimates ∇_Q L from fresh prompts, logs
/// the state, checks convergence on the attention criterion and steps
/// Q ← Q − η·∇.
pub fn train(
    state: AttentionState,
    features: &FeatureSet,
    task: &TaskSpec,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    let k = features.count();
    cfg.validate(k)?;
    if state.dim() != features.dim() {
        return Err(Error::DimensionMismatch {
            what: "state vs feature dimension",
            expected: features.dim(),
            got: state.dim(),
        });
    }
    if !cfg.warm_start && state.matrix().iter().any(|&x| x != 0.0) {
        return Err(Error::Config("training starts from Q = 0 unless warm_start is set".into()));
    }
    let delta = cfg.delta_for(k);
    let regime = resolve_regime(cfg.regime, task.lipschitz, features.separation(), delta);
    let eta = cfg.learning_rate.unwrap_or_else(|| {
        default_learning_rate(regime, k, task.lipschitz, features.separation(), cfg.eps_target)
    });
    let mut state = state;
    let mut rows = Vec::new();
    let mut converged_at = None;
    let fixed = if cfg.fixed_dataset {
        Some(draw_batch(features, task, cfg, &mut rng_from_seed(derive_seed(cfg.seed, &[0, 0])))?)
    } else {
        None
    };
    // the logged loss uses one batch for every epoch
    let loss_batch = draw_batch(
        features,
        task,
        cfg,
        &mut rng_from_seed(derive_seed(cfg.seed, &[u64::MAX, 2])),
    )?;
    for epoch in 0..cfg.max_epochs {
        let mut eval_rng = rng_from_seed(derive_seed(cfg.seed, &[epoch as u64, 1]));
        let attn_matrix = attention_matrix(
            &state,
            features,
            cfg.prompt_len,
            cfg.noise_radius,
            cfg.eval_prompts,
            &mut eval_rng,
        )
        .map_err(|e| as_divergence(e, epoch))?;
        let fresh;
        let batch = match &fixed {
            Some(b) => b,
            None => {
                let mut rng = rng_from_seed(derive_seed(cfg.seed, &[epoch as u64, 0]));
                fresh = draw_batch(features, task, cfg, &mut rng)?;
                &fresh
            }
        };
        let est = batch
            .estimate(&state, features)
            .map_err(|e| as_divergence(e, epoch))?;
        let loss = loss_batch
            .estimate(&state, features)
            .map_err(|e| as_divergence(e, epoch))?
            .mean_loss;
        for l in [est.mean_loss, loss] {
            if !l.is_finite() || l > cfg.divergence_threshold {
                return Err(Error::Divergence {
                    epoch,
                    last_stable: epoch.checked_sub(1),
                    loss: l,
                });
            }
        }
        let row = TrajectoryRow {
            epoch,
            loss,
            attn: (0..k).map(|a| attn_matrix[[a, a]]).collect(),
            attn_matrix,
            bilinear: bilinear_weights(&state, features)?,
            g: est.mean.clone(),
            g_std_err: est.std_err.clone(),
            conc_rate: batch.concentration_rate(features.probs_f64(), delta),
        };
        let done = row.worst_gap() <= cfg.eps_target;
        rows.push(row);
        if done && converged_at.is_none() {
            converged_at = Some(epoch);
        }
        if done && cfg.stop_at_convergence {
            break;
        }
        state.step(&est.grad_q, -eta);
    }
    Ok(TrainResult {
        state,
        log: TrajectoryLog {
            feature_count: k,
            rows,
            learning_rate: eta,
            delta,
            eps_target: cfg.eps_target,
            regime,
            converged_at,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub delta: f64,
    pub eps_target: f64,
    /// Trailing window (epochs) for the slope-drop detector.
    pub window: usize,
}

impl PhaseConfig {
    pub fn for_log(log: &TrajectoryLog) -> Self {
        Self {
            delta: log.delta,
            eps_target: log.eps_target,
            window: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSegment {
    pub label: String,
    pub start: usize,
    /// Inclusive last epoch.
    pub end: usize,
    /// Least-squares slope of the mean diagonal q_k against t.
    pub q_slope: f64,
    pub mean_dq_diag: f64,
    pub mean_abs_dq_offdiag: f64,
    /// mean |Δq_{k,k'}| / mean Δq_k.
    pub offdiag_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    /// End of the fast phase: first t with min_k Attn_k ≥ 1/(1+δ).
    pub t1_hat: Option<usize>,
    /// Convergence: first t with max_k (1 − Attn_k) ≤ ε.
    pub t_star_hat: Option<usize>,
    /// Slope-drop boundary inside the second phase, when detected.
    pub t_slow_hat: Option<usize>,
    pub segments: Vec<PhaseSegment>,
    /// Mean sign changes of Δq_{k,k'} per 100 epochs over off-diagonal pairs.
    pub oscillations_per_100: f64,
}

impl PhaseReport {
    pub fn segment(&self, label: &str) -> Option<&PhaseSegment> {
        self.segments.iter().find(|s| s.label == label)
    }
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

fn mean_diag_q(row: &TrajectoryRow) -> f64 {
    let k = row.bilinear.nrows();
    (0..k).map(|a| row.bilinear[[a, a]]).sum::<f64>() / k as f64
}

fn segment(rows: &[TrajectoryRow], label: &str, start: usize, end: usize) -> Option<PhaseSegment> {
    if end <= start {
        return None;
    }
    let part = &rows[start..=end];
    let xs: Vec<f64> = part.iter().map(|r| r.epoch as f64).collect();
    let ys: Vec<f64> = part.iter().map(mean_diag_q).collect();
    let k = rows[0].bilinear.nrows();
    let (mut diag, mut off, mut nd, mut no) = (0.0, 0.0, 0usize, 0usize);
    for w in part.windows(2) {
        for a in 0..k {
            for b in 0..k {
                let dq = w[1].bilinear[[a, b]] - w[0].bilinear[[a, b]];
                if a == b {
                    diag += dq;
                    nd += 1;
                } else {
                    off += dq.abs();
                    no += 1;
                }
            }
        }
    }
    let mean_dq_diag = diag / nd.max(1) as f64;
    let mean_abs_dq_offdiag = if no > 0 { off / no as f64 } else { 0.0 };
    Some(PhaseSegment {
        label: label.to_string(),
        start: rows[start].epoch,
        end: rows[end].epoch,
        q_slope: ls_slope(&xs, &ys),
        mean_dq_diag,
        mean_abs_dq_offdiag,
        offdiag_ratio: if mean_dq_diag != 0.0 {
            mean_abs_dq_offdiag / mean_dq_diag
        } else {
            f64::INFINITY
        },
    })
}

/// Segment a trajectory into its attention phases.
pub fn detect_phases(log: &TrajectoryLog, cfg: &PhaseConfig) -> Result<PhaseReport> {
    let rows = &log.rows;
    if rows.is_empty() {
        return Err(Error::Config("cannot detect phases on an empty log".into()));
    }
    let threshold = 1.0 / (1.0 + cfg.delta);
    let i1 = rows
        .iter()
        .position(|r| r.attn.iter().copied().fold(f64::INFINITY, f64::min) >= threshold);
    let istar = rows.iter().position(|r| r.worst_gap() <= cfg.eps_target);
    let last = rows.len() - 1;
    let mut segments = Vec::new();
    let mut i_slow = None;
    match i1 {
        None => segments.extend(segment(rows, "phase_1", 0, last)),
        Some(i1) => {
            segments.extend(segment(rows, "phase_1", 0, i1));
            let end2 = istar.map_or(last, |s| s.max(i1));
            // slope-drop detector: compare a trailing window against the
            // slope over the first window after the fast phase
            let w = cfg.window.max(2);
            if end2 >= i1 + 2 * w {
                let slope_at = |a: usize, b: usize| {
                    let xs: Vec<f64> = rows[a..=b].iter().map(|r| r.epoch as f64).collect();
                    let ys: Vec<f64> = rows[a..=b].iter().map(mean_diag_q).collect();
                    ls_slope(&xs, &ys)
                };
                let reference = slope_at(i1, i1 + w);
                if reference > 0.0 {
                    i_slow = (i1 + 2 * w..=end2)
                        .find(|&i| slope_at(i - w, i) < cfg.eps_target * reference)
                        .map(|i| i - w);
                }
            }
            match i_slow {
                Some(s) => {
                    segments.extend(segment(rows, "phase_2", i1, s));
                    segments.extend(segment(rows, "phase_3", s, end2));
                }
                None => segments.extend(segment(rows, "phase_2", i1, end2)),
            }
            if end2 < last {
                segments.extend(segment(rows, "converged", end2, last));
            }
        }
    }
    let k = rows[0].bilinear.nrows();
    let mut changes = 0usize;
    let mut pairs = 0usize;
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            pairs += 1;
            let inc: Vec<f64> = rows
                .windows(2)
                .map(|w| w[1].bilinear[[a, b]] - w[0].bilinear[[a, b]])
                .filter(|d| *d != 0.0)
                .collect();
            changes += inc.windows(2).filter(|w| w[0].signum() != w[1].signum()).count();
        }
    }
    let span = (rows[last].epoch - rows[0].epoch).max(1) as f64;
    Ok(PhaseReport {
        t1_hat: i1.map(|i| rows[i].epoch),
        t_star_hat: istar.map(|i| rows[i].epoch),
        t_slow_hat: i_slow.map(|i| rows[i].epoch),
        segments,
        oscillations_per_100: if pairs > 0 {
            changes as f64 / pairs as f64 * 100.0 / span
        } else {
            0.0
        },
    })
}

/// Held-out evaluation prompts: `per_task` token-level prompts for each task.
pub fn icl_eval_prompts(
    features: &FeatureSet,
    tasks: &[TaskFunction],
    len: usize,
    per_task: usize,
    seed: u64,
) -> Result<Vec<Prompt>> {
    let mut out = Vec::with_capacity(tasks.len() * per_task);
    for (i, t) in tasks.iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(seed, &[i as u64]));
        for _ in 0..per_task {
            out.push(sample_prompt_rng(features, t, len, 0.0, &mut rng)?);
        }
    }
    Ok(out)
}

/// Mean (ŷ − f(x_query))² over prompts; never updates the state.
pub fn icl_mse(state: &AttentionState, prompts: &[Prompt]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Config("no evaluation prompts".into()));
    }
    let mut sum = 0.0;
    for p in prompts {
        let o = forward(state, p)?;
        sum += 2.0 * o.loss;
    }
    Ok(sum / prompts.len() as f64)
}

/// In-context generalization error on held-out tasks.
pub fn evaluate_icl(
    state: &AttentionState,
    features: &FeatureSet,
    held_out: &[TaskFunction],
    len: usize,
    eval_prompts: usize,
    seed: u64,
) -> Result<f64> {
    let prompts = icl_eval_prompts(features, held_out, len, eval_prompts, seed)?;
    icl_mse(state, &prompts)
}
