use serde::{Deserialize, Serialize};

use super::advantage::AdvantageSource;

/// One fine-tuning round. Non-finite quantities serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTelemetry {
    pub step: usize,
    pub reward_raw_mean: Option<f64>,
    pub reward_raw_min: Option<f64>,
    pub reward_raw_max: Option<f64>,
    pub reward_shaped_mean: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub w_min: Option<f64>,
    pub w_mean: Option<f64>,
    pub w_max: Option<f64>,
    pub adv_source: AdvantageSource,
    pub w2_penalty: Option<f64>,
    pub overflow_flag: bool,
    /// Set on the last row of a run that hit a numeric failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

pub(crate) fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl RoundTelemetry {
    pub(crate) fn empty(step: usize, adv_source: AdvantageSource) -> Self {
        RoundTelemetry {
            step,
            reward_raw_mean: None,
            reward_raw_min: None,
            reward_raw_max: None,
            reward_shaped_mean: None,
            critic_loss: None,
            actor_loss: None,
            w_min: None,
            w_mean: None,
            w_max: None,
            adv_source,
            w2_penalty: None,
            overflow_flag: false,
            diagnostic: None,
        }
    }

    pub fn diverged(&self) -> bool {
        self.diagnostic.is_some()
    }
}
