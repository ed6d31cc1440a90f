//! Feature embeddings: K vectors in R^d with pairwise separation Θ(Δ) and
//! per-feature sampling probabilities Θ(1/K).

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

/// Rejection cap for perturbed feature construction.
pub const MAX_FEATURE_DRAWS: usize = 1000;

/// Relative magnitude bound of the tangential perturbation.
pub const PERTURBATION_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Orthogonal,
    Perturbed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<T = f64> {
    /// One feature per row (K × d).
    vectors: Array2<T>,
    probs: Vec<T>,
    separation: T,
    mode: FeatureMode,
    seed: u64,
}

impl<T: Scalar> FeatureSet<T> {
    /// Assemble a feature set from explicit vectors and check every invariant.
    pub fn new(
        vectors: Array2<T>,
        probs: Vec<T>,
        separation: T,
        mode: FeatureMode,
        seed: u64,
    ) -> Result<Self> {
        let fs = Self {
            vectors,
            probs,
            separation,
            mode,
            seed,
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn count(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn vectors(&self) -> &Array2<T> {
        &self.vectors
    }

    pub fn vector(&self, k: usize) -> ArrayView1<'_, T> {
        self.vectors.row(k)
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn separation(&self) -> T {
        self.separation
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn distance(&self, a: usize, b: usize) -> T {
        let d = &self.vectors.row(a) - &self.vectors.row(b);
        d.dot(&d).sqrt()
    }

    /// All unordered pairs (k, k', ‖v_k − v_k'‖) with k < k'.
    pub fn pairwise_distances(&self) -> Vec<(usize, usize, T)> {
        let k = self.count();
        let mut out = Vec::with_capacity(k * k.saturating_sub(1) / 2);
        for a in 0..k {
            for b in a + 1..k {
                out.push((a, b, self.distance(a, b)));
            }
        }
        out
    }

    /// Replace the sampling probabilities (must stay within [1/(2K), 2/K] and sum to one).
    pub fn with_probs(mut self, probs: Vec<T>) -> Result<Self> {
        self.probs = probs;
        self.validate()?;
        Ok(self)
    }

    /// Common norm ρ if the features are mutually orthogonal with equal norms.
    pub fn orthogonal_norm(&self) -> Option<T> {
        let k = self.count();
        let norms: Vec<T> = (0..k)
            .map(|a| self.vectors.row(a).dot(&self.vectors.row(a)).sqrt())
            .collect();
        let rho = norms[0];
        let tol = T::of(1e-9) * (rho * rho).max(T::one());
        for a in 0..k {
            if (norms[a] - rho).abs() > T::of(1e-9) * rho.max(T::one()) {
                return None;
            }
            for b in a + 1..k {
                if self.vectors.row(a).dot(&self.vectors.row(b)).abs() > tol {
                    return None;
                }
            }
        }
        Some(rho)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.count();
        if k == 0 || self.dim() == 0 {
            return Err(Error::Construction("empty feature set".into()));
        }
        if self.probs.len() != k {
            return Err(Error::DimensionMismatch {
                what: "feature probabilities",
                expected: k,
                got: self.probs.len(),
            });
        }
        if !(self.separation > T::zero()) {
            return Err(Error::Construction("separation must be positive".into()));
        }
        let sum: T = self.probs.iter().copied().sum();
        let sum_tol = if std::mem::size_of::<T>() == 4 { 1e-6 } else { 1e-12 };
        if (sum - T::one()).abs() > T::of(sum_tol) {
            return Err(Error::Construction(format!("probabilities sum to {sum}, not 1")));
        }
        let kf = T::of(k as f64);
        let (lo, hi) = (T::one() / (T::of(2.0) * kf), T::of(2.0) / kf);
        if let Some(p) = self.probs.iter().find(|&&p| p < lo || p > hi) {
            return Err(Error::Construction(format!(
                "probability {p} outside [1/(2K), 2/K]"
            )));
        }
        let (band_lo, band_hi) = separation_band(self.separation);
        for (a, b, dist) in self.pairwise_distances() {
            if dist < band_lo || dist > band_hi {
                return Err(Error::Construction(format!(
                    "features {a},{b} at distance {dist} outside [{band_lo}, {band_hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> FeatureSet<U> {
        FeatureSet {
            vectors: self.vectors.mapv(|x| U::of(x.to_f64_lossy())),
            probs: self.probs.iter().map(|p| U::of(p.to_f64_lossy())).collect(),
            separation: U::of(self.separation.to_f64_lossy()),
            mode: self.mode,
            seed: self.seed,
        }
    }

    /// Feature index whose vector is nearest to `x`.
    pub fn nearest(&self, x: ArrayView1<'_, T>) -> usize {
        let mut best = (0, T::infinity());
        for (k, row) in self.vectors.rows().into_iter().enumerate() {
            let d = &row - &x;
            let dist = d.dot(&d);
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best.0
    }
}

impl FeatureSet<f64> {
    pub fn probs_f64(&self) -> &[f64] {
        &self.probs
    }
}

/// The Θ(Δ) separation band [0.8Δ, 1.2Δ].
pub fn separation_band<T: Scalar>(delta: T) -> (T, T) {
    (T::of(0.8) * delta, T::of(1.2) * delta)
}

/// Build K features in R^d with separation Δ and uniform probabilities 1/K.
///
/// Orthogonal mode uses scaled canonical basis vectors of norm Δ/√2, so every
/// pair sits at distance exactly Δ. Perturbed mode adds to each vector a random
/// tangential offset of relative size at most 0.1 and redraws until every pair
/// lands in the separation band.
pub fn make_features(
    dim: usize,
    count: usize,
    separation: f64,
    mode: FeatureMode,
    seed: u64,
) -> Result<FeatureSet<f64>> {
    if count == 0 || dim == 0 {
        return Err(Error::Construction("dimension and count must be positive".into()));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::Construction(format!("separation {separation} must be positive")));
    }
    if count > dim {
        return Err(Error::Construction(format!(
            "cannot place {count} mutually orthogonal base vectors in R^{dim}"
        )));
    }
    let rho = separation / std::f64::consts::SQRT_2;
    let mut base = Array2::<f64>::zeros((count, dim));
    for k in 0..count {
        base[[k, k]] = rho;
    }
    let probs = vec![1.0 / count as f64; count];
    match mode {
        FeatureMode::Orthogonal => FeatureSet::new(base, probs, separation, mode, seed),
        FeatureMode::Perturbed => {
            if dim < 2 {
                return Err(Error::Construction(
                    "perturbed mode needs d >= 2 for tangential noise".into(),
                ));
            }
            let mut rng = rng_from_seed(seed);
            for _ in 0..MAX_FEATURE_DRAWS {
                let mut vectors = base.clone();
                for k in 0..count {
                    let v: Array1<f64> = base.row(k).to_owned();
                    let mut noise: Array1<f64> =
                        (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let along = noise.dot(&v) / v.dot(&v);
                    noise.scaled_add(-along, &v);
                    let norm = noise.dot(&noise).sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let scale: f64 = rng.random::<f64>() * PERTURBATION_SCALE * rho / norm;
                    vectors.row_mut(k).scaled_add(scale, &noise);
                }
                let candidate = FeatureSet {
                    vectors,
                    probs: probs.clone(),
                    separation,
                    mode,
                    seed,
                };
                if candidate.validate().is_ok() {
                    return Ok(candidate);
                }
            }
            Err(Error::GenerationFailure {
                attempts: MAX_FEATURE_DRAWS,
                what: "perturbed features outside the separation band".into(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_dim_orthogonal_example() {
        let fs = make_features(2, 2, 3.0, FeatureMode::Orthogonal, 0).unwrap();
        let r = 3.0 / 2f64.sqrt();
        assert_eq!(fs.vector(0).to_vec(), vec![r, 0.0]);
        assert_eq!(fs.vector(1).to_vec(), vec![0.0, r]);
        assert!((fs.distance(0, 1) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn section_six_grid_is_equidistant() {
        let fs = make_features(15, 4, 3.0, FeatureMode::Orthogonal, 0).unwrap();
        let pairs = fs.pairwise_distances();
        assert_eq!(pairs.len(), 6);
        for (_, _, d) in pairs {
            assert!((d - 3.0).abs() < 1e-14);
        }
        assert!((fs.orthogonal_norm().unwrap() - 3.0 / 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn perturbed_stays_in_band() {
        let fs = make_features(15, 4, 3.0, FeatureMode::Perturbed, 7).unwrap();
        for (_, _, d) in fs.pairwise_distances() {
            assert!((2.4..=3.6).contains(&d), "{d}");
        }
        assert!(fs.orthogonal_norm().is_none());
    }

    #[test]
    fn too_many_orthogonal_features() {
        let err = make_features(3, 4, 1.0, FeatureMode::Orthogonal, 0).unwrap_err();
        assert!(matches!(err, Error::Construction(_)));
    }

    #[test]
    fn probs_are_checked() {
        let fs = make_features(4, 4, 1.0, FeatureMode::Orthogonal, 0).unwrap();
        assert!(fs.clone().with_probs(vec![0.3, 0.3, 0.3, 0.1]).is_err()); // 0.1 < 1/(2K)
        assert!(fs.clone().with_probs(vec![0.3, 0.3, 0.2, 0.2]).is_ok());
        assert!(fs.with_probs(vec![0.3, 0.3, 0.3, 0.3]).is_err());
    }

    #[test]
    fn determinism() {
        let a = make_features(8, 5, 2.0, FeatureMode::Perturbed, 11).unwrap();
        let b = make_features(8, 5, 2.0, FeatureMode::Perturbed, 11).unwrap();
        assert_eq!(a, b);
    }
}
