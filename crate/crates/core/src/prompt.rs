//! Prompt sampling and the concentration event E*.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::rng::{categorical, multinomial_counts, rng_from_seed, Rng};
use crate::scalar::Scalar;
use crate::task::TaskFunction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Number of labelled tokens N.
    pub len: usize,
    /// Token noise radius ε_x; 0 means tokens are exact feature vectors.
    #[serde(default)]
    pub noise_radius: f64,
    pub seed: u64,
}

impl PromptConfig {
    pub fn new(len: usize, seed: u64) -> Self {
        Self {
            len,
            noise_radius: 0.0,
            seed,
        }
    }

    pub fn validate(&self, feature_count: usize) -> Result<()> {
        if self.len < feature_count.max(1) {
            return Err(Error::Config(format!(
                "prompt length {} must be at least K = {feature_count}",
                self.len
            )));
        }
        if !(self.noise_radius >= 0.0) || !self.noise_radius.is_finite() {
            return Err(Error::Config(format!("noise radius {} invalid", self.noise_radius)));
        }
        Ok(())
    }
}

/// One prompt. Tokens are stored one per row, i.e. the transpose of the d×N
/// input matrix X.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt<T = f64> {
    pub inputs: Array2<T>,
    pub responses: Array1<T>,
    pub query: Array1<T>,
    pub query_label: T,
    pub query_feature: usize,
    /// Feature index each token was generated from.
    pub token_features: Vec<usize>,
    /// |V_k| per feature.
    pub counts: Vec<usize>,
    pub noise_radius: T,
}

impl<T: Scalar> Prompt<T> {
    /// Exact-feature prompt from a token-to-feature assignment.
    pub fn from_features(
        features: &FeatureSet<T>,
        task: &TaskFunction<T>,
        token_features: Vec<usize>,
        query_feature: usize,
    ) -> Self {
        let n = token_features.len();
        let k = features.count();
        let mut inputs = Array2::zeros((n, features.dim()));
        let mut counts = vec![0usize; k];
        for (i, &f) in token_features.iter().enumerate() {
            inputs.row_mut(i).assign(&features.vector(f));
            counts[f] += 1;
        }
        let responses = token_features.iter().map(|&f| task.feature_value(f)).collect();
        Self {
            inputs,
            responses,
            query: features.vector(query_feature).to_owned(),
            query_label: task.feature_value(query_feature),
            query_feature,
            token_features,
            counts,
            noise_radius: T::zero(),
        }
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }

    pub fn is_exact(&self) -> bool {
        self.noise_radius == T::zero()
    }

    /// Class-level view; only available for exact-feature prompts.
    pub fn grouped(&self, task_values: &[T]) -> Result<GroupedPrompt<T>> {
        if !self.is_exact() {
            return Err(Error::IdentityNotApplicable(
                "grouping tokens by feature needs eps_x = 0".into(),
            ));
        }
        Ok(GroupedPrompt {
            counts: self.counts.clone(),
            query_feature: self.query_feature,
            values: task_values.to_vec(),
            query_label: self.query_label,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Prompt<U> {
        let c = |x: &T| U::of(x.to_f64_lossy());
        Prompt {
            inputs: self.inputs.map(c),
            responses: self.responses.map(c),
            query: self.query.map(c),
            query_label: c(&self.query_label),
            query_feature: self.query_feature,
            token_features: self.token_features.clone(),
            counts: self.counts.clone(),
            noise_radius: c(&self.noise_radius),
        }
    }
}

/// An exact-feature prompt summarized by class: which feature is queried,
/// how many tokens each feature contributes, and the task value at every
/// feature. Token order never matters for the attention model, so this view
/// carries everything the forward pass and gradients need.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedPrompt<T = f64> {
    pub counts: Vec<usize>,
    pub query_feature: usize,
    pub values: Vec<T>,
    pub query_label: T,
}

impl<T: Scalar> GroupedPrompt<T> {
    pub fn len(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn query_feature_for(features: &FeatureSet<f64>, task: &TaskFunction<f64>, rng: &mut Rng) -> usize {
    match task.anchor() {
        Some(a) => a,
        None => categorical(rng, features.probs_f64()),
    }
}

/// Draw a full token-level prompt. Each token picks feature k with probability
/// p_k and is then perturbed uniformly within radius ε_x. Two-level tasks pin
/// the query to their anchor feature.
pub fn sample_prompt(
    features: &FeatureSet<f64>,
    task: &TaskFunction<f64>,
    cfg: &PromptConfig,
) -> Result<Prompt<f64>> {
    cfg.validate(features.count())?;
    let mut rng = rng_from_seed(cfg.seed);
    sample_prompt_rng(features, task, cfg.len, cfg.noise_radius, &mut rng)
}

pub fn sample_prompt_rng(
    features: &FeatureSet<f64>,
    task: &TaskFunction<f64>,
    len: usize,
    noise_radius: f64,
    rng: &mut Rng,
) -> Result<Prompt<f64>> {
    let d = features.dim();
    let probs = features.probs_f64();
    let token_features: Vec<usize> = (0..len).map(|_| categorical(rng, probs)).collect();
    let query_feature = query_feature_for(features, task, rng);
    if noise_radius == 0.0 {
        return Ok(Prompt::from_features(features, task, token_features, query_feature));
    }
    let mut perturb = |k: usize| perturb_feature(features, k, noise_radius, rng);
    let mut inputs = Array2::zeros((len, d));
    let mut counts = vec![0usize; features.count()];
    for (i, &k) in token_features.iter().enumerate() {
        inputs.row_mut(i).assign(&perturb(k));
        counts[k] += 1;
    }
    let query = perturb(query_feature);
    let responses = inputs.rows().into_iter().map(|x| task.eval(x, features)).collect();
    let query_label = task.eval(query.view(), features);
    Ok(Prompt {
        inputs,
        responses,
        query,
        query_label,
        query_feature,
        token_features,
        counts,
        noise_radius,
    })
}

/// v_k plus a uniform draw from the ball of radius `radius`.
pub fn perturb_feature(features: &FeatureSet<f64>, k: usize, radius: f64, rng: &mut Rng) -> Array1<f64> {
    let d = features.dim();
    let mut x = features.vector(k).to_owned();
    if radius == 0.0 {
        return x;
    }
    let dir: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = dir.dot(&dir).sqrt();
    if n > 0.0 {
        let u: f64 = rng.random();
        x.scaled_add(radius * u.powf(1.0 / d as f64) / n, &dir);
    }
    x
}

/// Draw a class-level prompt directly (multinomial counts); same distribution
/// as grouping a [`sample_prompt`] draw.
pub fn sample_grouped_rng(
    features: &FeatureSet<f64>,
    task: &TaskFunction<f64>,
    len: usize,
    rng: &mut Rng,
) -> GroupedPrompt<f64> {
    let counts = multinomial_counts(rng, len, features.probs_f64());
    let query_feature = query_feature_for(features, task, rng);
    GroupedPrompt {
        counts,
        query_feature,
        values: task.feature_values().to_vec(),
        query_label: task.feature_value(query_feature),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub delta: f64,
    pub member: bool,
    pub counts: Vec<usize>,
    pub bound: f64,
}

/// Lower bound 1 − 3·exp(−δ²N/25) on the probability of E*.
pub fn concentration_bound(delta: f64, len: usize) -> f64 {
    1.0 - 3.0 * (-delta * delta * len as f64 / 25.0).exp()
}

/// Whether every |V_k| lies in [(p_k − δ)N, (p_k + δ)N].
pub fn in_concentration_set(counts: &[usize], probs: &[f64], delta: f64) -> bool {
    let n = counts.iter().sum::<usize>() as f64;
    counts.iter().zip(probs).all(|(&c, &p)| {
        let c = c as f64;
        let slack = 1e-9 * n.max(1.0);
        c >= (p - delta) * n - slack && c <= (p + delta) * n + slack
    })
}

pub fn concentration_check(counts: &[usize], probs: &[f64], delta: f64) -> Result<ConcentrationReport> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("delta {delta} must be positive")));
    }
    if counts.len() != probs.len() {
        return Err(Error::DimensionMismatch {
            what: "counts vs probabilities",
            expected: probs.len(),
            got: counts.len(),
        });
    }
    let n: usize = counts.iter().sum();
    Ok(ConcentrationReport {
        delta,
        member: in_concentration_set(counts, probs, delta),
        counts: counts.to_vec(),
        bound: concentration_bound(delta, n),
    })
}

/// Default δ = √(20K/N), the smallest value the concentration bound admits.
pub fn default_delta(feature_count: usize, len: usize) -> f64 {
    (20.0 * feature_count as f64 / len as f64).sqrt()
}

/// Monte-Carlo E*-membership frequency over `prompts` fresh count draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationStudy {
    pub delta: f64,
    pub len: usize,
    pub prompts: usize,
    pub frequency: f64,
    pub bound: f64,
    /// 3·sqrt(bound·(1−bound)/M), the sampling allowance under the bound (0 if bound ≤ 0).
    pub allowance: f64,
}

impl ConcentrationStudy {
    pub fn satisfies_bound(&self) -> bool {
        self.frequency >= self.bound - self.allowance
    }
}

pub fn concentration_study(
    features: &FeatureSet<f64>,
    len: usize,
    delta: f64,
    prompts: usize,
    seed: u64,
) -> Result<ConcentrationStudy> {
    if prompts == 0 {
        return Err(Error::Config("need at least one prompt".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::Config(format!("delta {delta} must be positive")));
    }
    let mut rng = rng_from_seed(seed);
    let probs = features.probs_f64();
    let hits = (0..prompts)
        .filter(|_| {
            let counts = multinomial_counts(&mut rng, len, probs);
            in_concentration_set(&counts, probs, delta)
        })
        .count();
    let bound = concentration_bound(delta, len);
    let b = bound.clamp(0.0, 1.0);
    Ok(ConcentrationStudy {
        delta,
        len,
        prompts,
        frequency: hits as f64 / prompts as f64,
        bound,
        allowance: 3.0 * (b * (1.0 - b) / prompts as f64).sqrt(),
    })
}
