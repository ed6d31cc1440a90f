//! One-layer softmax attention with the merged key-query matrix Q and fixed
//! value scalar ν. The query attends over the N labelled tokens with logits
//! x_iᵀ Q x_query and predicts ŷ = ν·Σ attn_i y_i.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::prompt::{GroupedPrompt, Prompt};
use crate::scalar::Scalar;
use crate::task::TaskFunction;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState<T = f64> {
    q: Array2<T>,
    value: T,
}

impl<T: Scalar> AttentionState<T> {
    /// Zero initialization, ν = 1.
    pub fn zeros(dim: usize) -> Self {
        Self {
            q: Array2::zeros((dim, dim)),
            value: T::one(),
        }
    }

    pub fn from_matrix(q: Array2<T>) -> Result<Self> {
        if q.nrows() != q.ncols() {
            return Err(Error::DimensionMismatch {
                what: "Q must be square",
                expected: q.nrows(),
                got: q.ncols(),
            });
        }
        Ok(Self { q, value: T::one() })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.q
    }

    /// Fixed value scalar ν.
    pub fn value(&self) -> T {
        self.value
    }

    /// Q ← Q + step·direction. ν is untouched.
    pub fn step(&mut self, direction: &Array2<T>, step: T) {
        self.q.scaled_add(step, direction);
    }

    pub fn cast<U: Scalar>(&self) -> AttentionState<U> {
        AttentionState {
            q: self.q.mapv(|x| U::of(x.to_f64_lossy())),
            value: U::of(self.value.to_f64_lossy()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<T = f64> {
    /// attn_i per token.
    pub token_scores: Array1<T>,
    /// Attn_k per feature class.
    pub feature_scores: Vec<T>,
    pub prediction: T,
    pub loss: T,
}

impl<T: Scalar> AttentionOutput<T> {
    pub fn residual(&self, label: T) -> T {
        self.prediction - label
    }
}

fn check_dims<T: Scalar>(state: &AttentionState<T>, prompt: &Prompt<T>) -> Result<()> {
    let d = state.dim();
    if prompt.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "query dimension",
            expected: d,
            got: prompt.dim(),
        });
    }
    if prompt.inputs.ncols() != d {
        return Err(Error::DimensionMismatch {
            what: "token dimension",
            expected: d,
            got: prompt.inputs.ncols(),
        });
    }
    if prompt.is_empty() {
        return Err(Error::Config("prompt has no tokens".into()));
    }
    if prompt.inputs.nrows() != prompt.len() || prompt.token_features.len() != prompt.len() {
        return Err(Error::DimensionMismatch {
            what: "token rows vs responses",
            expected: prompt.len(),
            got: prompt.inputs.nrows(),
        });
    }
    Ok(())
}

/// Raw logits x_iᵀ Q x_query.
pub fn logits<T: Scalar>(state: &AttentionState<T>, prompt: &Prompt<T>) -> Result<Array1<T>> {
    check_dims(state, prompt)?;
    let u = state.q.dot(&prompt.query);
    Ok(prompt.inputs.dot(&u))
}

fn softmax_in_place<T: Scalar>(z: &mut Array1<T>) -> Result<()> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        let token = z.iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(Error::NumericOverflow { token });
    }
    z.mapv_inplace(|v| (v - max).exp());
    if let Some(token) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { token });
    }
    let sum: T = z.iter().copied().sum();
    z.mapv_inplace(|v| v / sum);
    Ok(())
}

fn finish<T: Scalar>(
    state: &AttentionState<T>,
    prompt: &Prompt<T>,
    token_scores: Array1<T>,
) -> AttentionOutput<T> {
    let k = prompt.counts.len();
    let mut feature_scores = vec![T::zero(); k];
    for (&f, &a) in prompt.token_features.iter().zip(token_scores.iter()) {
        feature_scores[f] += a;
    }
    let prediction = state.value * token_scores.dot(&prompt.responses);
    let r = prediction - prompt.query_label;
    AttentionOutput {
        token_scores,
        feature_scores,
        prediction,
        loss: T::of(0.5) * r * r,
    }
}

/// Forward pass with max-logit stabilization.
pub fn forward<T: Scalar>(state: &AttentionState<T>, prompt: &Prompt<T>) -> Result<AttentionOutput<T>> {
    let mut z = logits(state, prompt)?;
    if let Some(token) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { token });
    }
    softmax_in_place(&mut z)?;
    Ok(finish(state, prompt, z))
}

/// Diagnostic hook: forward pass with `shift` added to every logit first.
pub fn forward_shifted<T: Scalar>(
    state: &AttentionState<T>,
    prompt: &Prompt<T>,
    shift: T,
) -> Result<AttentionOutput<T>> {
    let mut z = logits(state, prompt)?;
    z.mapv_inplace(|v| v + shift);
    if let Some(token) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { token });
    }
    softmax_in_place(&mut z)?;
    Ok(finish(state, prompt, z))
}

/// Bilinear weights: entry (k, k') is v_{k'}ᵀ Q v_k, the logit a query at
/// feature k assigns to tokens of feature k'. The diagonal is q_k.
pub fn bilinear_weights<T: Scalar>(
    state: &AttentionState<T>,
    features: &FeatureSet<T>,
) -> Result<Array2<T>> {
    if features.dim() != state.dim() {
        return Err(Error::DimensionMismatch {
            what: "feature dimension",
            expected: state.dim(),
            got: features.dim(),
        });
    }
    let v = features.vectors();
    // (V Q Vᵀ)[k', k] = v_{k'}ᵀ Q v_k
    let b = v.dot(&state.q).dot(&v.t()).reversed_axes();
    Ok(b.as_standard_layout().into_owned())
}

/// Class-level output for an exact-feature prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassOutput<T = f64> {
    /// attn of a single token of each class.
    pub token_score: Vec<T>,
    pub feature_scores: Vec<T>,
    pub prediction: T,
    pub loss: T,
}

/// Forward pass on a grouped prompt given the query's row of bilinear
/// weights (`row[m]` = logit of a class-m token). Identical to [`forward`]
/// on any token-level prompt with the same counts.
pub fn forward_classes<T: Scalar>(
    row: &[T],
    value: T,
    prompt: &GroupedPrompt<T>,
) -> Result<ClassOutput<T>> {
    let k = prompt.counts.len();
    if row.len() != k || prompt.values.len() != k {
        return Err(Error::DimensionMismatch {
            what: "class logits",
            expected: k,
            got: row.len(),
        });
    }
    if prompt.is_empty() {
        return Err(Error::Config("prompt has no tokens".into()));
    }
    let mut max = T::neg_infinity();
    for (m, (&z, &n)) in row.iter().zip(&prompt.counts).enumerate() {
        if !z.is_finite() {
            return Err(Error::NumericOverflow { token: m });
        }
        if n > 0 && z > max {
            max = z;
        }
    }
    let mut token_score: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = token_score
        .iter()
        .zip(&prompt.counts)
        .map(|(&e, &n)| T::of(n as f64) * e)
        .sum();
    for e in token_score.iter_mut() {
        *e = *e / sum;
    }
    let feature_scores: Vec<T> = token_score
        .iter()
        .zip(&prompt.counts)
        .map(|(&a, &n)| T::of(n as f64) * a)
        .collect();
    let prediction = value
        * feature_scores
            .iter()
            .zip(&prompt.values)
            .map(|(&a, &f)| a * f)
            .sum::<T>();
    let r = prediction - prompt.query_label;
    Ok(ClassOutput {
        token_score,
        feature_scores,
        prediction,
        loss: T::of(0.5) * r * r,
    })
}

/// (ŷ − f(v_k*))² − (Σ_{n≠k*} Attn_n (f(v_n) − f(v_k*)))², zero up to rounding.
pub fn loss_identity_residual<T: Scalar>(
    out: &AttentionOutput<T>,
    prompt: &Prompt<T>,
    task: &TaskFunction<T>,
) -> Result<T> {
    if !prompt.is_exact() {
        return Err(Error::IdentityNotApplicable(
            "loss decomposition assumes tokens equal to feature vectors (eps_x = 0)".into(),
        ));
    }
    let ks = prompt.query_feature;
    let fk = task.feature_value(ks);
    let lhs = (out.prediction - fk) * (out.prediction - fk);
    let off: T = out
        .feature_scores
        .iter()
        .enumerate()
        .filter(|&(n, _)| n != ks)
        .map(|(n, &a)| a * (task.feature_value(n) - fk))
        .sum();
    Ok(lhs - off * off)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{make_features, FeatureMode};
    use crate::task::TaskFamily;
    use ndarray::array;

    /// K=2 fixture: f(v_1)=0, f(v_2)=1, counts (3,1), query at feature 1.
    fn two_feature_fixture() -> (FeatureSet, TaskFunction, Prompt) {
        let fs = make_features(2, 2, 2f64.sqrt(), FeatureMode::Orthogonal, 0).unwrap();
        // f(x) = <e_2, x> on the unit basis
        let task = TaskFunction::new(
            TaskFamily::Linear,
            vec![1.0, 0.0],
            1.0,
            vec![0.0, 1.0],
            None,
            &fs,
            0,
        )
        .unwrap();
        let prompt = Prompt::from_features(&fs, &task, vec![0, 0, 0, 1], 0);
        (fs, task, prompt)
    }

    #[test]
    fn zero_init_is_uniform() {
        let (fs, task, _) = two_feature_fixture();
        let tokens: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let p = Prompt::from_features(&fs, &task, tokens, 1);
        let out = forward(&AttentionState::zeros(2), &p).unwrap();
        for &a in out.token_scores.iter() {
            assert_eq!(a, 0.01);
            assert_eq!(a, 1.0 / 100.0);
        }
    }

    #[test]
    fn two_feature_enumeration() {
        let (_, task, p) = two_feature_fixture();
        assert_eq!(task.feature_values(), &[0.0, 1.0]);
        let out = forward(&AttentionState::zeros(2), &p).unwrap();
        assert!((out.feature_scores[0] - 0.75).abs() < 1e-15);
        assert!((out.prediction - 0.25).abs() < 1e-15);
        assert!((out.loss - 0.03125).abs() < 1e-15);
        let res = loss_identity_residual(&out, &p, &task).unwrap();
        assert!(res.abs() < 1e-15);
    }

    #[test]
    fn saturation_limit() {
        let (fs, _, p) = two_feature_fixture();
        let rho2 = fs.vector(0).dot(&fs.vector(0));
        for scale in [10.0, 100.0, 1000.0] {
            // q_{1,1} - q_{1,2} = scale * rho2
            let st = AttentionState::from_matrix(array![[scale, 0.0], [0.0, 0.0]]).unwrap();
            let out = forward(&st, &p).unwrap();
            let b = bilinear_weights(&st, &fs).unwrap();
            assert!((b[[0, 0]] - b[[0, 1]] - scale * rho2).abs() < 1e-9);
            if scale >= 100.0 {
                assert!(1.0 - out.feature_scores[0] < 1e-40);
                assert!(out.prediction.abs() < 1e-40);
                assert!(out.loss < 1e-80);
            }
        }
    }

    #[test]
    fn huge_logits_stay_finite() {
        let (_, _, p) = two_feature_fixture();
        let st = AttentionState::from_matrix(array![[1e6, 0.0], [0.0, 0.0]]).unwrap();
        let out = forward(&st, &p).unwrap();
        assert!(out.token_scores.iter().all(|a| a.is_finite()));
    }

    #[test]
    fn infinite_logit_names_token() {
        let mut z = array![0.0, 1.0, f64::INFINITY, 2.0];
        match softmax_in_place(&mut z) {
            Err(Error::NumericOverflow { token }) => assert_eq!(token, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch() {
        let (_, _, p) = two_feature_fixture();
        assert!(matches!(
            forward(&AttentionState::zeros(3), &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bilinear_zero_and_identity() {
        let fs = make_features(5, 3, 3.0, FeatureMode::Orthogonal, 0).unwrap();
        let z = bilinear_weights(&AttentionState::zeros(5), &fs).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
        let id = AttentionState::from_matrix(Array2::eye(5)).unwrap();
        let b = bilinear_weights(&id, &fs).unwrap();
        for k in 0..3 {
            for m in 0..3 {
                let expect = if k == m { 4.5 } else { 0.0 };
                assert!((b[[k, m]] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn noisy_prompt_rejects_identity() {
        let (_, task, mut p) = two_feature_fixture();
        p.noise_radius = 0.1;
        let out = forward(&AttentionState::zeros(2), &p).unwrap();
        assert!(matches!(
            loss_identity_residual(&out, &p, &task),
            Err(Error::IdentityNotApplicable(_))
        ));
    }

    #[test]
    fn f32_forward_matches_f64() {
        let (_, task, p) = two_feature_fixture();
        let st = AttentionState::from_matrix(array![[0.3, -0.2], [0.1, 0.5]]).unwrap();
        let a = forward(&st, &p).unwrap();
        let b = forward(&st.cast::<f32>(), &p.cast::<f32>()).unwrap();
        assert!((a.prediction - b.prediction as f64).abs() < 1e-6);
        let _ = task;
    }
}
