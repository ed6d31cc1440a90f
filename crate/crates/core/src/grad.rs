//! Gradients of the squared loss with respect to Q.
//!
//! Sign convention for class gradients: g = −∂ℓ/∂(logit), summed over the
//! tokens of a class, so q ← q + η·g is the descent direction and the
//! query's own class gradient Attn_k*·r² is nonnegative.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::model::{forward, forward_classes, AttentionOutput, AttentionState, ClassOutput};
use crate::prompt::{sample_grouped_rng, GroupedPrompt, Prompt};
use crate::rng::{rng_from_seed, Rng};
use crate::scalar::Scalar;
use crate::task::TaskSpec;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradRecord<T = f64> {
    /// ∇_Q ℓ for one prompt.
    pub grad_q: Array2<T>,
    /// g^cls_k = −Σ_{i ∈ V_k} ∂ℓ/∂z_i.
    pub class_grads: Vec<T>,
    /// r = ŷ − y_query.
    pub residual: T,
    pub output: AttentionOutput<T>,
}

/// ∇_Q ℓ = r · Σ_i attn_i (ν y_i − ŷ) x_i x_queryᵀ, plus class-level logit gradients.
pub fn analytic_grad<T: Scalar>(state: &AttentionState<T>, prompt: &Prompt<T>) -> Result<GradRecord<T>> {
    let output = forward(state, prompt)?;
    let r = output.residual(prompt.query_label);
    let nu = state.value();
    let logit_grads: Vec<T> = output
        .token_scores
        .iter()
        .zip(prompt.responses.iter())
        .map(|(&a, &y)| r * a * (nu * y - output.prediction))
        .collect();
    let mut class_grads = vec![T::zero(); prompt.counts.len()];
    let mut weighted = ndarray::Array1::<T>::zeros(prompt.dim());
    for (i, &gz) in logit_grads.iter().enumerate() {
        class_grads[prompt.token_features[i]] -= gz;
        weighted.scaled_add(gz, &prompt.inputs.row(i));
    }
    let d = prompt.dim();
    let mut grad_q = Array2::<T>::zeros((d, d));
    for a in 0..d {
        for b in 0..d {
            grad_q[[a, b]] = weighted[a] * prompt.query[b];
        }
    }
    if !r.is_finite() || grad_q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient {
            what: "gradient of Q",
            seed: None,
        });
    }
    Ok(GradRecord {
        grad_q,
        class_grads,
        residual: r,
        output,
    })
}

/// Central differences of an arbitrary scalar function of a matrix, entry by entry.
pub fn central_difference<T, F>(mut f: F, at: &Array2<T>, h: T) -> Result<Array2<T>>
where
    T: Scalar,
    F: FnMut(&Array2<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::Config(format!("finite-difference step {h} must be positive")));
    }
    let mut out = Array2::zeros(at.raw_dim());
    let mut probe = at.clone();
    for idx in 0..at.len() {
        let (a, b) = (idx / at.ncols(), idx % at.ncols());
        let orig = probe[[a, b]];
        probe[[a, b]] = orig + h;
        let plus = f(&probe)?;
        probe[[a, b]] = orig - h;
        let minus = f(&probe)?;
        probe[[a, b]] = orig;
        out[[a, b]] = (plus - minus) / (T::of(2.0) * h);
    }
    Ok(out)
}

/// Finite-difference estimate of ∇_Q ℓ (2·d² loss evaluations).
pub fn fd_oracle<T: Scalar>(state: &AttentionState<T>, prompt: &Prompt<T>, h: T) -> Result<Array2<T>> {
    central_difference(
        |q| {
            let st = AttentionState::from_matrix(q.clone())?;
            Ok(forward(&st, prompt)?.loss)
        },
        state.matrix(),
        h,
    )
}

/// ‖a − b‖_F / max(‖a‖_F, ‖b‖_F), or the absolute difference when both vanish.
pub fn relative_frobenius_error<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> T {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    let scale = a.mapv(|x| x * x).sum().sqrt().max(b.mapv(|x| x * x).sum().sqrt());
    if scale > T::zero() {
        diff / scale
    } else {
        diff
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGrad<T = f64> {
    /// Entry (k, m) = −v_mᵀ (∇_Q ℓ) v_k.
    pub matrix: Array2<T>,
    /// ρ⁴ when the features are orthogonal with common norm ρ; `None` marks
    /// the ρ⁴ identity as inapplicable.
    pub rho4: Option<T>,
    pub record: GradRecord<T>,
}

impl<T: Scalar> ProjectedGrad<T> {
    pub fn identity_applicable(&self) -> bool {
        self.rho4.is_some()
    }
}

/// Project the matrix gradient onto feature pairs. For orthogonal features of
/// norm ρ and x_query = v_k*, row k* equals ρ⁴ times the class gradients.
pub fn projected_grad<T: Scalar>(
    state: &AttentionState<T>,
    prompt: &Prompt<T>,
    features: &FeatureSet<T>,
) -> Result<ProjectedGrad<T>> {
    if !prompt.is_exact() {
        return Err(Error::IdentityNotApplicable(
            "projection onto feature pairs needs eps_x = 0".into(),
        ));
    }
    if features.dim() != state.dim() {
        return Err(Error::DimensionMismatch {
            what: "feature dimension",
            expected: state.dim(),
            got: features.dim(),
        });
    }
    let record = analytic_grad(state, prompt)?;
    let v = features.vectors();
    // (V G Vᵀ)[m, k] = v_mᵀ G v_k
    let matrix = v.dot(&record.grad_q).dot(&v.t()).reversed_axes().mapv(|x| -x);
    let rho4 = features.orthogonal_norm().map(|r| r * r * r * r);
    Ok(ProjectedGrad { matrix, rho4, record })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassGrad<T = f64> {
    pub output: ClassOutput<T>,
    pub class_grads: Vec<T>,
    pub residual: T,
}

/// Class-level gradients of a grouped prompt, g_m = −r·Attn_m·(ν f(v_m) − ŷ).
pub fn class_grad<T: Scalar>(row: &[T], value: T, prompt: &GroupedPrompt<T>) -> Result<ClassGrad<T>> {
    let output = forward_classes(row, value, prompt)?;
    let r = output.prediction - prompt.query_label;
    let class_grads = output
        .feature_scores
        .iter()
        .zip(&prompt.values)
        .map(|(&a, &f)| -r * a * (value * f - output.prediction))
        .collect();
    Ok(ClassGrad {
        output,
        class_grads,
        residual: r,
    })
}

/// Monte-Carlo estimate of the population gradient quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationGradEstimate {
    pub samples: usize,
    pub mean_loss: f64,
    /// mean[k][m] = E[1{x_query = v_k} · g^cls_m]; the diagonal is g_k and the
    /// off-diagonal entries are g_{k,m}.
    pub mean: Array2<f64>,
    /// Sample standard deviation over √M, entrywise.
    pub std_err: Array2<f64>,
    /// Mean ∇_Q ℓ over the same samples.
    pub grad_q: Array2<f64>,
}

impl PopulationGradEstimate {
    pub fn g(&self, k: usize) -> f64 {
        self.mean[[k, k]]
    }

    pub fn g_pair(&self, k: usize, m: usize) -> f64 {
        self.mean[[k, m]]
    }

    pub fn max_offdiag_abs(&self) -> f64 {
        let k = self.mean.nrows();
        let mut best = 0.0f64;
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    best = best.max(self.mean[[a, b]].abs());
                }
            }
        }
        best
    }
}

/// Fresh (task, grouped prompt) draws.
pub fn draw_population_samples(
    features: &FeatureSet<f64>,
    task: &TaskSpec,
    len: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<GroupedPrompt<f64>>> {
    (0..count)
        .map(|_| {
            let t = task.sample(features, rng)?;
            Ok(sample_grouped_rng(features, &t, len, rng))
        })
        .collect()
}

struct Accumulator {
    k: usize,
    per_sample: Vec<Array2<f64>>,
    loss_sum: f64,
}

impl Accumulator {
    fn new(k: usize, m: usize) -> Self {
        Self {
            k,
            per_sample: Vec::with_capacity(m),
            loss_sum: 0.0,
        }
    }

    fn push(&mut self, query: usize, class_grads: &[f64], loss: f64) {
        let mut g = Array2::zeros((self.k, self.k));
        for (m, &v) in class_grads.iter().enumerate() {
            g[[query, m]] = v;
        }
        self.per_sample.push(g);
        self.loss_sum += loss;
    }

    fn finish(self, grad_q: Array2<f64>) -> PopulationGradEstimate {
        let m = self.per_sample.len();
        let mf = m as f64;
        let mut mean = Array2::zeros((self.k, self.k));
        for g in &self.per_sample {
            mean += g;
        }
        mean /= mf;
        let mut var = Array2::<f64>::zeros((self.k, self.k));
        if m > 1 {
            for g in &self.per_sample {
                var += &(g - &mean).mapv(|x| x * x);
            }
            var /= mf - 1.0;
        }
        let std_err = var.mapv(|v| (v / mf).sqrt());
        PopulationGradEstimate {
            samples: m,
            mean_loss: self.loss_sum / mf,
            mean,
            std_err,
            grad_q,
        }
    }
}

/// Population estimate over exact-feature samples. Works at class level:
/// logits come from the bilinear weights, and ∇_Q L = −Vᵀ meanᵀ V.
pub fn population_grad_on(
    state: &AttentionState<f64>,
    features: &FeatureSet<f64>,
    samples: &[GroupedPrompt<f64>],
) -> Result<PopulationGradEstimate> {
    if samples.is_empty() {
        return Err(Error::Config("population gradient needs M >= 1".into()));
    }
    let bil = crate::model::bilinear_weights(state, features)?;
    let k = features.count();
    let mut acc = Accumulator::new(k, samples.len());
    for s in samples {
        let row = bil.row(s.query_feature);
        let cg = class_grad(row.as_slice().expect("contiguous row"), state.value(), s)?;
        acc.push(s.query_feature, &cg.class_grads, cg.output.loss);
    }
    let k_dim = state.dim();
    let mut est = acc.finish(Array2::zeros((k_dim, k_dim)));
    let v = features.vectors();
    est.grad_q = -v.t().dot(&est.mean.t()).dot(v);
    if est.grad_q.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteGradient {
            what: "population gradient",
            seed: None,
        });
    }
    Ok(est)
}

/// Population estimate over token-level prompts (required when eps_x > 0).
pub fn population_grad_tokens(
    state: &AttentionState<f64>,
    features: &FeatureSet<f64>,
    prompts: &[Prompt<f64>],
) -> Result<PopulationGradEstimate> {
    if prompts.is_empty() {
        return Err(Error::Config("population gradient needs M >= 1".into()));
    }
    let k = features.count();
    let d = state.dim();
    let mut acc = Accumulator::new(k, prompts.len());
    let mut grad_q = Array2::<f64>::zeros((d, d));
    for p in prompts {
        let rec = analytic_grad(state, p)?;
        grad_q += &rec.grad_q;
        acc.push(p.query_feature, &rec.class_grads, rec.output.loss);
    }
    grad_q /= prompts.len() as f64;
    Ok(acc.finish(grad_q))
}

/// Draw M fresh exact-feature samples from `seed` and estimate.
pub fn population_grad(
    state: &AttentionState<f64>,
    features: &FeatureSet<f64>,
    task: &TaskSpec,
    len: usize,
    samples: usize,
    seed: u64,
) -> Result<PopulationGradEstimate> {
    let mut rng = rng_from_seed(seed);
    let draws = draw_population_samples(features, task, len, samples, &mut rng)?;
    population_grad_on(state, features, &draws)
}
