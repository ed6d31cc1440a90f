//! Random problem instances and the analytic-vs-finite-difference sweep.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::features::{make_features, FeatureMode, FeatureSet};
use crate::grad::{analytic_grad, fd_oracle, relative_frobenius_error, DEFAULT_FD_STEP};
use crate::model::AttentionState;
use crate::prompt::{sample_prompt_rng, Prompt};
use crate::rng::{derive_seed, rng_from_seed};
use crate::task::{sample_task, TaskFamily, TaskFunction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceLimits {
    pub max_dim: usize,
    pub max_features: usize,
    pub max_len: usize,
    pub max_q_norm: f64,
    pub separation: f64,
    pub lipschitz: f64,
    pub mode: FeatureMode,
}

impl Default for InstanceLimits {
    fn default() -> Self {
        Self {
            max_dim: 8,
            max_features: 6,
            max_len: 50,
            max_q_norm: 5.0,
            separation: std::f64::consts::SQRT_2,
            lipschitz: 1.0,
            mode: FeatureMode::Perturbed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub seed: u64,
    pub features: FeatureSet,
    pub task: TaskFunction,
    pub prompt: Prompt,
    pub state: AttentionState,
}

/// A random exact-feature instance: 2 ≤ K ≤ max_features, K ≤ d ≤ max_dim,
/// K ≤ N ≤ max_len, random family, Q Gaussian rescaled to ‖Q‖_F ~ U(0, max_q_norm].
pub fn random_instance(seed: u64, limits: &InstanceLimits) -> Result<RandomInstance> {
    let mut rng = rng_from_seed(seed);
    let k = rng.random_range(2..=limits.max_features.max(2));
    let d = rng.random_range(k.max(2)..=limits.max_dim.max(k).max(2));
    let n = rng.random_range(k..=limits.max_len.max(k));
    let features = make_features(d, k, limits.separation, limits.mode, derive_seed(seed, &[1]))?;
    let family = match rng.random_range(0..3) {
        0 => TaskFamily::Linear,
        1 => TaskFamily::Exponential,
        _ => TaskFamily::TwoLevel,
    };
    let task = sample_task(family, limits.lipschitz, &features, derive_seed(seed, &[2]))?;
    // constant responses give an identically zero gradient
    let mut prompt = sample_prompt_rng(&features, &task, n, 0.0, &mut rng)?;
    for _ in 0..1000 {
        let first = prompt.responses[0];
        if prompt.responses.iter().any(|&y| y != first) {
            break;
        }
        prompt = sample_prompt_rng(&features, &task, n, 0.0, &mut rng)?;
    }
    let mut q = Array2::<f64>::from_shape_simple_fn((d, d), || StandardNormal.sample(&mut rng));
    let norm = q.mapv(|x| x * x).sum().sqrt();
    let target: f64 = limits.max_q_norm * (1.0 - rng.random::<f64>());
    if norm > 0.0 {
        q *= target / norm;
    }
    Ok(RandomInstance {
        seed,
        features,
        task,
        prompt,
        state: AttentionState::from_matrix(q)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub h: f64,
    pub tolerance: f64,
    pub limits: InstanceLimits,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            h: DEFAULT_FD_STEP,
            tolerance: 1e-6,
            limits: InstanceLimits::default(),
        }
    }
}

/// One CSV row of the gradient check report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub seed: u64,
    pub rel_error: f64,
    pub h: f64,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckRow> {
        self.rows
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_error(&self) -> f64 {
        self.worst().map_or(0.0, |r| r.rel_error)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tolerance
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,rel_error,h,d,K,N\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.seed,
                crate::io::fmt_f64(r.rel_error),
                crate::io::fmt_f64(r.h),
                r.d,
                r.k,
                r.n
            ));
        }
        out
    }
}

pub fn gradcheck_sweep(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let rows = (0..cfg.instances)
        .map(|i| {
            let seed = derive_seed(cfg.seed, &[i as u64]);
            let inst = random_instance(seed, &cfg.limits)?;
            let analytic = analytic_grad(&inst.state, &inst.prompt)?.grad_q;
            let fd = fd_oracle(&inst.state, &inst.prompt, cfg.h)?;
            Ok(GradCheckRow {
                seed,
                rel_error: relative_frobenius_error(&analytic, &fd),
                h: cfg.h,
                d: inst.features.dim(),
                k: inst.features.count(),
                n: inst.prompt.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        rows,
        tolerance: cfg.tolerance,
    })
}
