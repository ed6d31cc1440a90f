//! Regression tasks from the non-degenerate L-Lipschitz class.
//!
//! A task is only accepted when it passes both class checks on the feature
//! set it will be evaluated on: the pairwise slope never exceeds L, and every
//! feature has a partner whose value gap is at least `c_sep · L · distance`.

use ndarray::ArrayView1;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMode, FeatureSet};
use crate::rng::{categorical, rng_from_seed, Rng};
use crate::scalar::Scalar;

/// Rejection cap for task sampling.
pub const MAX_TASK_DRAWS: usize = 1000;

/// Default non-degeneracy constant.
pub const DEFAULT_C_SEP: f64 = 0.25;

/// Slack on the Lipschitz check.
pub const LIPSCHITZ_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    /// f(x) = a·⟨w, x⟩ + b
    Linear,
    /// f(x) = c·exp(α·γ·⟨w, x⟩ + β), γ chosen so the max pairwise slope is L
    Exponential,
    /// f(v_anchor) = b, f(v_n) = b + σ·L·Δ_eff elsewhere (nearest-feature lookup off the features)
    TwoLevel,
}

impl std::fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskFamily::Linear => "linear",
            TaskFamily::Exponential => "exponential",
            TaskFamily::TwoLevel => "two_level",
        })
    }
}

/// Which class invariant a task failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassViolation {
    Lipschitz { a: usize, b: usize },
    Degenerate { k: usize },
}

impl std::fmt::Display for ClassViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassViolation::Lipschitz { a, b } => write!(f, "lipschitz (pair {a},{b})"),
            ClassViolation::Degenerate { k } => write!(f, "non-degeneracy (feature {k})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFunction<T = f64> {
    family: TaskFamily,
    params: Vec<T>,
    lipschitz: T,
    probe_radius: T,
    direction: Vec<T>,
    anchor: Option<usize>,
    values: Vec<T>,
    seed: u64,
}

impl<T: Scalar> TaskFunction<T> {
    /// Build a task from explicit parameters and verify class membership on
    /// `features`.
    ///
    /// Parameter layouts: linear `[a, b]`; exponential `[c, alpha, beta, gamma]`;
    /// two-level `[b, sigma, delta_eff]` with `anchor` set.
    pub fn new(
        family: TaskFamily,
        params: Vec<T>,
        lipschitz: T,
        direction: Vec<T>,
        anchor: Option<usize>,
        features: &FeatureSet<T>,
        seed: u64,
    ) -> Result<Self> {
        let task = Self::unchecked(family, params, lipschitz, direction, anchor, features, seed)?;
        if let Err(v) = task.check_class(features, T::of(DEFAULT_C_SEP)) {
            return Err(Error::FamilyInfeasible {
                family: family.to_string(),
                attempts: 1,
                invariant: v.to_string(),
            });
        }
        Ok(task)
    }

    fn unchecked(
        family: TaskFamily,
        params: Vec<T>,
        lipschitz: T,
        direction: Vec<T>,
        anchor: Option<usize>,
        features: &FeatureSet<T>,
        seed: u64,
    ) -> Result<Self> {
        let expected = match family {
            TaskFamily::Linear => 2,
            TaskFamily::Exponential => 4,
            TaskFamily::TwoLevel => 3,
        };
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "task parameters",
                expected,
                got: params.len(),
            });
        }
        if family != TaskFamily::TwoLevel && direction.len() != features.dim() {
            return Err(Error::DimensionMismatch {
                what: "task direction",
                expected: features.dim(),
                got: direction.len(),
            });
        }
        if family == TaskFamily::TwoLevel && anchor.map_or(true, |a| a >= features.count()) {
            return Err(Error::Config("two-level task needs a valid anchor feature".into()));
        }
        if !(lipschitz > T::zero()) {
            return Err(Error::Config(format!("Lipschitz constant {lipschitz} must be positive")));
        }
        let mut task = Self {
            family,
            params,
            lipschitz,
            probe_radius: features.separation(),
            direction,
            anchor,
            values: Vec::new(),
            seed,
        };
        task.values = (0..features.count())
            .map(|k| task.eval_smooth_or_level(features.vector(k), Some(k)))
            .collect();
        Ok(task)
    }

    pub fn family(&self) -> TaskFamily {
        self.family
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn lipschitz(&self) -> T {
        self.lipschitz
    }

    /// δ_0, carried as metadata only.
    pub fn probe_radius(&self) -> T {
        self.probe_radius
    }

    pub fn direction(&self) -> &[T] {
        &self.direction
    }

    pub fn anchor(&self) -> Option<usize> {
        self.anchor
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// f(v_k).
    pub fn feature_value(&self, k: usize) -> T {
        self.values[k]
    }

    pub fn feature_values(&self) -> &[T] {
        &self.values
    }

    /// f(x) for an arbitrary input (two-level tasks use the nearest feature).
    pub fn eval(&self, x: ArrayView1<'_, T>, features: &FeatureSet<T>) -> T {
        match self.family {
            TaskFamily::TwoLevel => self.values[features.nearest(x)],
            _ => self.eval_smooth_or_level(x, None),
        }
    }

    fn eval_smooth_or_level(&self, x: ArrayView1<'_, T>, feature: Option<usize>) -> T {
        let proj = || -> T {
            self.direction
                .iter()
                .zip(x.iter())
                .map(|(&w, &xi)| w * xi)
                .sum()
        };
        match self.family {
            TaskFamily::Linear => self.params[0] * proj() + self.params[1],
            TaskFamily::Exponential => {
                let (c, alpha, beta, gamma) =
                    (self.params[0], self.params[1], self.params[2], self.params[3]);
                c * (alpha * gamma * proj() + beta).exp()
            }
            TaskFamily::TwoLevel => {
                let (b, sigma, delta_eff) = (self.params[0], self.params[1], self.params[2]);
                match feature {
                    Some(k) if Some(k) == self.anchor => b,
                    _ => b + sigma * self.lipschitz * delta_eff,
                }
            }
        }
    }

    /// max over pairs |f(v_k) − f(v_k')| / ‖v_k − v_k'‖.
    pub fn max_pair_slope(&self, features: &FeatureSet<T>) -> T {
        features
            .pairwise_distances()
            .into_iter()
            .map(|(a, b, d)| (self.values[a] - self.values[b]).abs() / d)
            .fold(T::zero(), T::max)
    }

    /// Independent re-check of both class invariants.
    pub fn check_class(&self, features: &FeatureSet<T>, c_sep: T) -> Result<(), ClassViolation> {
        let k = features.count();
        let limit = T::one() + T::of(LIPSCHITZ_SLACK);
        for (a, b, d) in features.pairwise_distances() {
            if (self.values[a] - self.values[b]).abs() > limit * self.lipschitz * d {
                return Err(ClassViolation::Lipschitz { a, b });
            }
        }
        for a in 0..k {
            let ok = (0..k).filter(|&b| b != a).any(|b| {
                (self.values[a] - self.values[b]).abs()
                    >= c_sep * self.lipschitz * features.distance(a, b)
            });
            if !ok {
                return Err(ClassViolation::Degenerate { k: a });
            }
        }
        Ok(())
    }
}

/// Knobs for [`sample_task`]; defaults follow the exponential-task experiment
/// (α = 1, β = 0.5, c ~ U[L, 2L]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSamplerConfig {
    pub c_sep: f64,
    pub alpha: f64,
    pub beta: f64,
    /// c is drawn from U[c_lo·L, c_hi·L].
    pub c_lo: f64,
    pub c_hi: f64,
}

impl Default for TaskSamplerConfig {
    fn default() -> Self {
        Self {
            c_sep: DEFAULT_C_SEP,
            alpha: 1.0,
            beta: 0.5,
            c_lo: 1.0,
            c_hi: 2.0,
        }
    }
}

/// Draw one task of `family` with operative Lipschitz constant `lipschitz`.
pub fn sample_task(
    family: TaskFamily,
    lipschitz: f64,
    features: &FeatureSet<f64>,
    seed: u64,
) -> Result<TaskFunction<f64>> {
    sample_task_with(family, lipschitz, features, &TaskSamplerConfig::default(), seed)
}

pub fn sample_task_with(
    family: TaskFamily,
    lipschitz: f64,
    features: &FeatureSet<f64>,
    cfg: &TaskSamplerConfig,
    seed: u64,
) -> Result<TaskFunction<f64>> {
    if !(lipschitz > 0.0) || !lipschitz.is_finite() {
        return Err(Error::Config(format!("Lipschitz constant {lipschitz} must be positive")));
    }
    let mut rng = rng_from_seed(seed);
    sample_task_rng(family, lipschitz, features, cfg, &mut rng, seed)
}

/// Same as [`sample_task_with`] but drawing from a caller-owned stream.
pub fn sample_task_rng(
    family: TaskFamily,
    lipschitz: f64,
    features: &FeatureSet<f64>,
    cfg: &TaskSamplerConfig,
    rng: &mut Rng,
    seed: u64,
) -> Result<TaskFunction<f64>> {
    let mut last = String::from("none");
    for _ in 0..MAX_TASK_DRAWS {
        let draw = match family {
            TaskFamily::Linear => draw_linear(lipschitz, features, rng, seed),
            TaskFamily::Exponential => draw_exponential(lipschitz, features, cfg, rng, seed),
            TaskFamily::TwoLevel => draw_two_level(lipschitz, features, rng, seed),
        };
        match draw {
            Ok(task) => match task.check_class(features, cfg.c_sep) {
                Ok(()) => return Ok(task),
                Err(v) => last = v.to_string(),
            },
            Err(reason) => last = reason,
        }
    }
    Err(Error::FamilyInfeasible {
        family: family.to_string(),
        attempts: MAX_TASK_DRAWS,
        invariant: last,
    })
}

fn unit_direction(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return w.into_iter().map(|x| x / n).collect();
        }
    }
}

fn projections(features: &FeatureSet<f64>, w: &[f64]) -> Vec<f64> {
    (0..features.count())
        .map(|k| features.vector(k).iter().zip(w).map(|(a, b)| a * b).sum())
        .collect()
}

fn draw_linear(
    lipschitz: f64,
    features: &FeatureSet<f64>,
    rng: &mut Rng,
    seed: u64,
) -> Result<TaskFunction<f64>, String> {
    let w = unit_direction(features.dim(), rng);
    let b: f64 = rng.random_range(-1.0..=1.0);
    let proj = projections(features, &w);
    let max_ratio = features
        .pairwise_distances()
        .into_iter()
        .map(|(a, c, d)| (proj[a] - proj[c]).abs() / d)
        .fold(0.0, f64::max);
    if max_ratio <= 1e-12 {
        return Err("direction orthogonal to every feature difference".into());
    }
    let a = lipschitz / max_ratio;
    TaskFunction::unchecked(TaskFamily::Linear, vec![a, b], lipschitz, w, None, features, seed)
        .map_err(|e| e.to_string())
}

fn exp_slope(c: f64, alpha: f64, beta: f64, gamma: f64, proj: &[f64], pairs: &[(usize, usize, f64)]) -> f64 {
    pairs
        .iter()
        .map(|&(a, b, d)| {
            let fa = c * (alpha * gamma * proj[a] + beta).exp();
            let fb = c * (alpha * gamma * proj[b] + beta).exp();
            (fa - fb).abs() / d
        })
        .fold(0.0, f64::max)
}

fn draw_exponential(
    lipschitz: f64,
    features: &FeatureSet<f64>,
    cfg: &TaskSamplerConfig,
    rng: &mut Rng,
    seed: u64,
) -> Result<TaskFunction<f64>, String> {
    let w = unit_direction(features.dim(), rng);
    let c: f64 = rng.random_range(cfg.c_lo * lipschitz..=cfg.c_hi * lipschitz);
    let proj = projections(features, &w);
    let pairs = features.pairwise_distances();
    let slope = |g: f64| exp_slope(c, cfg.alpha, cfg.beta, g, &proj, &pairs);
    let mut hi = 1.0;
    let mut doublings = 0;
    while slope(hi) < lipschitz {
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 || !slope(hi).is_finite() {
            return Err("exponential slope cannot reach L".into());
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) < lipschitz {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // take the side that does not exceed L
    let gamma = lo;
    if (slope(gamma) - lipschitz).abs() > 1e-10 * lipschitz {
        return Err("exponential rescaling did not converge".into());
    }
    TaskFunction::unchecked(
        TaskFamily::Exponential,
        vec![c, cfg.alpha, cfg.beta, gamma],
        lipschitz,
        w,
        None,
        features,
        seed,
    )
    .map_err(|e| e.to_string())
}

fn draw_two_level(
    lipschitz: f64,
    features: &FeatureSet<f64>,
    rng: &mut Rng,
    seed: u64,
) -> Result<TaskFunction<f64>, String> {
    let anchor = categorical(rng, features.probs_f64());
    let b: f64 = rng.random_range(-1.0..=1.0);
    let sigma = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let delta_eff = (0..features.count())
        .filter(|&n| n != anchor)
        .map(|n| features.distance(anchor, n))
        .fold(f64::INFINITY, f64::min);
    if !delta_eff.is_finite() {
        return Err("two-level task needs K >= 2".into());
    }
    TaskFunction::unchecked(
        TaskFamily::TwoLevel,
        vec![b, sigma, delta_eff],
        lipschitz,
        Vec::new(),
        Some(anchor),
        features,
        seed,
    )
    .map_err(|e| e.to_string())
}

/// A task distribution: family, operative Lipschitz constant and sampler knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    #[serde(rename = "L")]
    pub lipschitz: f64,
    #[serde(default)]
    pub sampler: TaskSamplerConfig,
}

impl TaskSpec {
    pub fn new(family: TaskFamily, lipschitz: f64) -> Self {
        Self {
            family,
            lipschitz,
            sampler: TaskSamplerConfig::default(),
        }
    }

    /// Draw a task whose own seed comes from `rng`.
    pub fn sample(&self, features: &FeatureSet<f64>, rng: &mut Rng) -> Result<TaskFunction<f64>> {
        use rand::RngCore as _;
        let seed = rng.next_u64();
        sample_task_with(self.family, self.lipschitz, features, &self.sampler, seed)
    }
}

/// Serializable record of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub family: TaskFamily,
    pub params: Vec<f64>,
    #[serde(rename = "L")]
    pub lipschitz: f64,
    pub delta0: f64,
    pub direction: Vec<f64>,
    pub anchor: Option<usize>,
    pub seed: u64,
}

/// JSON document holding a feature set and tasks defined on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDocument {
    pub dim: usize,
    pub count: usize,
    pub vectors: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub separation: f64,
    pub mode: FeatureMode,
    pub seed: u64,
    pub tasks: Vec<TaskRecord>,
}

impl TaskDocument {
    pub fn new(features: &FeatureSet<f64>, tasks: &[TaskFunction<f64>]) -> Self {
        Self {
            dim: features.dim(),
            count: features.count(),
            vectors: features.vectors().rows().into_iter().map(|r| r.to_vec()).collect(),
            probs: features.probs().to_vec(),
            separation: features.separation(),
            mode: features.mode(),
            seed: features.seed(),
            tasks: tasks
                .iter()
                .map(|t| TaskRecord {
                    family: t.family(),
                    params: t.params().to_vec(),
                    lipschitz: t.lipschitz(),
                    delta0: t.probe_radius(),
                    direction: t.direction().to_vec(),
                    anchor: t.anchor(),
                    seed: t.seed(),
                })
                .collect(),
        }
    }

    /// Rebuild and re-verify the feature set and every task.
    pub fn restore(&self) -> Result<(FeatureSet<f64>, Vec<TaskFunction<f64>>)> {
        if self.vectors.len() != self.count {
            return Err(Error::DimensionMismatch {
                what: "feature rows",
                expected: self.count,
                got: self.vectors.len(),
            });
        }
        let mut flat = Vec::with_capacity(self.dim * self.count);
        for row in &self.vectors {
            if row.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    what: "feature row length",
                    expected: self.dim,
                    got: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        let vectors = ndarray::Array2::from_shape_vec((self.count, self.dim), flat)
            .map_err(|e| Error::Config(e.to_string()))?;
        let features =
            FeatureSet::new(vectors, self.probs.clone(), self.separation, self.mode, self.seed)?;
        let tasks = self
            .tasks
            .iter()
            .map(|r| {
                TaskFunction::new(
                    r.family,
                    r.params.clone(),
                    r.lipschitz,
                    r.direction.clone(),
                    r.anchor,
                    &features,
                    r.seed,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((features, tasks))
    }
}
