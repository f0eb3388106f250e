//! Toy conditional generation tasks: per-condition Gaussian mixtures over a
//! standard-normal base distribution.

use std::f64::consts::PI;

use gradcore::Tensor;
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Index into a task's discrete condition vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConditionId(pub usize);

impl ConditionId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Isotropic Gaussian mixture with a shared standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub std: f64,
}

impl GaussianMixture {
    pub fn new(means: Vec<Vec<f64>>, weights: Vec<f64>, std: f64) -> Result<Self> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(CoreError::InvalidInput(format!(
                "mixture needs one weight per component ({} means, {} weights)",
                means.len(),
                weights.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(CoreError::InvalidInput("mixture means must share a positive dimension".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || ((weights.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidInput(format!(
                "mixture weights must be non-negative and sum to 1, got {weights:?}"
            )));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(CoreError::InvalidInput(format!("mixture std must be > 0, got {std}")));
        }
        Ok(GaussianMixture { means, weights, std })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Weighted mean of the component means.
    pub fn barycenter(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (m, w) in self.means.iter().zip(&self.weights) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = WeightedIndex::new(&self.weights)
            .expect("weights validated")
            .sample(rng);
        self.means[k]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.std * z
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyTaskSpec {
    pub name: String,
    /// One target distribution per condition id.
    pub conditions: Vec<GaussianMixture>,
}

impl ToyTaskSpec {
    pub fn new(name: impl Into<String>, conditions: Vec<GaussianMixture>) -> Result<Self> {
        let dim = conditions
            .first()
            .ok_or_else(|| CoreError::InvalidInput("task needs at least one condition".into()))?
            .dim();
        if conditions.iter().any(|c| c.dim() != dim) {
            return Err(CoreError::InvalidInput("all conditions must share a dimension".into()));
        }
        Ok(ToyTaskSpec {
            name: name.into(),
            conditions,
        })
    }

    /// Four conditions, each an 8-component ring of radius 4 with σ = 0.3,
    /// rotated by a quarter of the inter-mode angle per condition.
    pub fn ring() -> Self {
        let (n_cond, n_modes, radius) = (4, 8, 4.0);
        let conditions = (0..n_cond)
            .map(|c| {
                let offset = c as f64 * (2.0 * PI / n_modes as f64) / n_cond as f64;
                let means = (0..n_modes)
                    .map(|j| {
                        let a = 2.0 * PI * j as f64 / n_modes as f64 + offset;
                        vec![radius * a.cos(), radius * a.sin()]
                    })
                    .collect();
                GaussianMixture::new(means, vec![1.0 / n_modes as f64; n_modes], 0.3).expect("static task")
            })
            .collect();
        ToyTaskSpec::new("ring", conditions).expect("static task")
    }

    /// One condition, modes at −2 (mass `weight_a`) and +2, σ = 0.3.
    pub fn two_mode_1d(weight_a: f64) -> Result<Self> {
        let mix = GaussianMixture::new(vec![vec![-2.0], vec![2.0]], vec![weight_a, 1.0 - weight_a], 0.3)?;
        ToyTaskSpec::new("two_mode_1d", vec![mix])
    }

    pub fn dim(&self) -> usize {
        self.conditions[0].dim()
    }

    pub fn vocab(&self) -> usize {
        self.conditions.len()
    }

    pub fn target(&self, c: ConditionId) -> Result<&GaussianMixture> {
        self.conditions.get(c.0).ok_or(CoreError::InvalidCondition {
            id: c.0,
            vocab: self.vocab(),
        })
    }

    pub fn check_condition(&self, c: ConditionId) -> Result<()> {
        self.target(c).map(|_| ())
    }

    /// `n` draws from `q(x_1 | c)` as a `[n, d]` matrix.
    pub fn sample_target<R: Rng + ?Sized>(&self, c: ConditionId, n: usize, rng: &mut R) -> Result<Tensor> {
        let target = self.target(c)?;
        let mut data = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            data.extend(target.sample_one(rng));
        }
        Ok(Tensor::new(vec![n, self.dim()], data)?)
    }

    /// `n` standard-normal base draws as a `[n, d]` matrix.
    pub fn sample_base<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        sample_standard_normal(n, self.dim(), rng)
    }

    /// Uniform draws over the condition vocabulary.
    pub fn sample_conditions<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<ConditionId> {
        let dist = Uniform::new(0, self.vocab()).expect("non-empty vocabulary");
        (0..n).map(|_| ConditionId(dist.sample(rng))).collect()
    }
}

pub fn sample_standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("normal draws are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ring_has_expected_geometry() {
        let task = ToyTaskSpec::ring();
        assert_eq!(task.dim(), 2);
        assert_eq!(task.vocab(), 4);
        for mix in &task.conditions {
            assert_eq!(mix.means.len(), 8);
            for m in &mix.means {
                assert!(((m[0] * m[0] + m[1] * m[1]).sqrt() - 4.0).abs() < 1e-12);
            }
            let b = mix.barycenter();
            assert!(b[0].abs() < 1e-12 && b[1].abs() < 1e-12);
        }
        assert_ne!(task.conditions[0].means[0], task.conditions[1].means[0]);
    }

    #[test]
    fn mixture_validation() {
        assert!(GaussianMixture::new(vec![vec![0.0]], vec![0.5], 1.0).is_err());
        assert!(GaussianMixture::new(vec![vec![0.0]], vec![1.0], 0.0).is_err());
        assert!(GaussianMixture::new(vec![vec![0.0], vec![1.0, 2.0]], vec![0.5, 0.5], 1.0).is_err());
        assert!(GaussianMixture::new(vec![vec![0.0]], vec![1.0], 0.2).is_ok());
    }

    #[test]
    fn sampling_respects_mixture_weights() {
        let task = ToyTaskSpec::two_mode_1d(0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = task.sample_target(ConditionId(0), 8000, &mut rng).unwrap();
        let left = x.data().iter().filter(|&&v| v < 0.0).count() as f64 / 8000.0;
        assert!((left - 0.25).abs() < 0.02, "{left}");
        assert!(task.sample_target(ConditionId(1), 1, &mut rng).is_err());
    }
}
