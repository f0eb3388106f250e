//! Advantage estimates and the exponential weights derived from them.

use serde::{Deserialize, Serialize};

use crate::critic::{ShapedRewards, ValueNet};
use crate::error::{CoreError, Result};
use crate::net::StateBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdvantageSource {
    #[serde(rename = "GRAE")]
    Grae,
    CriticAdvantage,
    OutcomeReward,
}

impl AdvantageSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AdvantageSource::Grae => "GRAE",
            AdvantageSource::CriticAdvantage => "CriticAdvantage",
            AdvantageSource::OutcomeReward => "OutcomeReward",
        }
    }
}

impl std::fmt::Display for AdvantageSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageBatch {
    pub values: Vec<f64>,
    pub source: AdvantageSource,
    /// The clip threshold once [`clip_advantage`] has been applied.
    pub delta: Option<f64>,
}

impl AdvantageBatch {
    pub fn clipped(&self) -> bool {
        self.delta.is_some()
    }
}

/// `(r̃ − μ) / (σ + ε)` with the population standard deviation.
pub fn grae_advantage(shaped: &ShapedRewards, epsilon: f64) -> Result<AdvantageBatch> {
    let r = &shaped.shaped;
    if r.is_empty() {
        return Err(CoreError::EmptyBatch("grae_advantage"));
    }
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + epsilon;
    Ok(AdvantageBatch {
        values: r.iter().map(|v| (v - mean) / denom).collect(),
        source: AdvantageSource::Grae,
        delta: None,
    })
}

/// `r̃ − V_φ(x_t, t, c)`, with the critic evaluated off-tape.
pub fn critic_advantage(shaped: &ShapedRewards, net: &ValueNet, states: &StateBatch) -> Result<AdvantageBatch> {
    if shaped.len() != states.len() {
        return Err(CoreError::LengthMismatch {
            what: "critic_advantage states",
            left: shaped.len(),
            right: states.len(),
        });
    }
    let values = net.predict_batch(states)?;
    Ok(AdvantageBatch {
        values: shaped.shaped.iter().zip(&values).map(|(r, v)| r - v).collect(),
        source: AdvantageSource::CriticAdvantage,
        delta: None,
    })
}

pub fn clip_advantage(adv: &AdvantageBatch, delta: f64) -> Result<AdvantageBatch> {
    if !(delta > 0.0) {
        return Err(CoreError::InvalidInput(format!("clip threshold must be > 0, got {delta}")));
    }
    if let Some(v) = adv.values.iter().find(|v| !v.is_finite()) {
        return Err(CoreError::InvalidInput(format!("non-finite advantage {v}")));
    }
    Ok(AdvantageBatch {
        values: adv.values.iter().map(|v| v.clamp(-delta, delta)).collect(),
        source: adv.source,
        delta: Some(delta),
    })
}

/// Per-sample loss weights. Weights whose exponential overflowed are capped at
/// `f64::MAX` and `overflow` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBatch {
    pub values: Vec<f64>,
    pub overflow: bool,
}

impl WeightBatch {
    fn exp(scores: &[f64], tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(CoreError::InvalidInput(format!("tau must be > 0, got {tau}")));
        }
        if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
            return Err(CoreError::InvalidInput(format!("non-finite weighting score {v}")));
        }
        let mut overflow = false;
        let values = scores
            .iter()
            .map(|s| {
                let w = (tau * s).exp();
                if w.is_finite() {
                    w
                } else {
                    overflow = true;
                    f64::MAX
                }
            })
            .collect();
        Ok(WeightBatch { values, overflow })
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean computed as `Σ w_i / n` term by term so capped weights stay finite.
    pub fn mean(&self) -> f64 {
        let n = self.values.len() as f64;
        self.values.iter().map(|w| w / n).sum()
    }
}

/// `exp(τ · A)`.
pub fn gcw_weights(adv: &AdvantageBatch, tau: f64) -> Result<WeightBatch> {
    WeightBatch::exp(&adv.values, tau)
}

/// `exp(τ · r̃)`, the reward-weighted regression weights.
pub fn outcome_weights(shaped: &ShapedRewards, tau: f64) -> Result<WeightBatch> {
    WeightBatch::exp(&shaped.shaped, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::tests::{constant_critic, states};
    use crate::critic::reward_shape;

    fn shaped(v: &[f64]) -> ShapedRewards {
        ShapedRewards::passthrough(v).unwrap()
    }

    fn adv(v: &[f64]) -> AdvantageBatch {
        AdvantageBatch {
            values: v.to_vec(),
            source: AdvantageSource::CriticAdvantage,
            delta: None,
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn grae_examples() {
        let a = grae_advantage(&shaped(&[0.0, 1.0]), 1e-6).unwrap();
        assert!(close(&a.values, &[-1.0, 1.0], 1e-5));
        assert_eq!(a.source, AdvantageSource::Grae);
        assert!(!a.clipped());
        assert_eq!(grae_advantage(&shaped(&[0.7]), 1e-6).unwrap().values, vec![0.0]);
        let a = grae_advantage(&shaped(&[1.0, 2.0, 3.0]), 1e-6).unwrap();
        assert!(close(&a.values, &[-1.2247, 0.0, 1.2247], 1e-4), "{:?}", a.values);
    }

    #[test]
    fn critic_advantage_examples() {
        let two = states(&[&[0.0, 0.0], &[1.0, 0.0]], &[0.3, 0.6]);
        let a = critic_advantage(&shaped(&[0.2, 0.8]), &constant_critic(0.0, 2, 1), &two).unwrap();
        assert_eq!(a.values, vec![0.2, 0.8]);
        assert_eq!(a.source, AdvantageSource::CriticAdvantage);
        let one = states(&[&[0.0, 0.0]], &[0.5]);
        let a = critic_advantage(&shaped(&[0.2]), &constant_critic(1.0, 2, 1), &one).unwrap();
        assert!(close(&a.values, &[-0.8], 1e-15));
        let a = critic_advantage(&shaped(&[0.3, 0.3]), &constant_critic(0.3, 2, 1), &two).unwrap();
        assert_eq!(a.values, vec![0.0, 0.0]);
        assert!(critic_advantage(&shaped(&[0.2]), &constant_critic(0.0, 2, 1), &two).is_err());
    }

    #[test]
    fn clipping_examples() {
        let c = clip_advantage(&adv(&[7.0, -7.0, 3.0]), 5.0).unwrap();
        assert_eq!(c.values, vec![5.0, -5.0, 3.0]);
        assert!(c.clipped());
        assert_eq!(c.source, AdvantageSource::CriticAdvantage);
        assert!(clip_advantage(&adv(&[1.0]), 0.0).is_err());
        assert!(clip_advantage(&adv(&[f64::NAN]), 1.0).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(gcw_weights(&adv(&[0.0]), 1.0).unwrap().values, vec![1.0]);
        let w = gcw_weights(&adv(&[2f64.ln()]), 1.0).unwrap().values[0];
        assert!((w - 2.0).abs() < 1e-12);
        let w = gcw_weights(&adv(&[1.0]), 2.0).unwrap().values[0];
        assert!((w - 7.389056).abs() < 1e-5);
        assert_eq!(outcome_weights(&shaped(&[0.0]), 1.0).unwrap().values, vec![1.0]);
        let w = outcome_weights(&shaped(&[1.0]), 1.0).unwrap().values[0];
        assert!((w - std::f64::consts::E).abs() < 1e-5);
        let w = outcome_weights(&shaped(&[0.0, 1.0]), 0.5).unwrap().values;
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 1.648721).abs() < 1e-6);
        assert!(gcw_weights(&adv(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn overflow_is_capped_and_flagged() {
        let w = gcw_weights(&adv(&[1000.0, 0.0]), 1.0).unwrap();
        assert!(w.overflow);
        assert_eq!(w.values, vec![f64::MAX, 1.0]);
        assert!(w.mean().is_finite());
        assert!(!gcw_weights(&adv(&[5.0]), 1.0).unwrap().overflow);
    }

    #[test]
    fn grae_is_shift_invariant_without_shaping() {
        let raw = [0.3, -1.2, 4.0, 2.5, 0.0];
        let base = grae_advantage(&shaped(&raw), 1e-6).unwrap();
        let moved: Vec<f64> = raw.iter().map(|r| r + 123.0).collect();
        let moved = grae_advantage(&shaped(&moved), 1e-6).unwrap();
        assert!(close(&base.values, &moved.values, 1e-10));
        let via_shaping = grae_advantage(&reward_shape(&raw, 1e-6).unwrap(), 1e-6).unwrap();
        let moved_shaping: Vec<f64> = raw.iter().map(|r| r - 77.0).collect();
        let moved_shaping = grae_advantage(&reward_shape(&moved_shaping, 1e-6).unwrap(), 1e-6).unwrap();
        assert!(close(&via_shaping.values, &moved_shaping.values, 1e-10));
    }
}
