//! The regularized actor objective and the per-round weight dispatch.

use gradcore::{Graph, Tape, Tensor, Var};

use super::advantage::{
    clip_advantage, critic_advantage, gcw_weights, grae_advantage, outcome_weights, AdvantageBatch, AdvantageSource,
    WeightBatch,
};
use crate::config::{RunConfig, WeightingMode};
use crate::critic::{reward_shape, ShapedRewards, ValueNet};
use crate::error::{CoreError, Result};
use crate::flow::{resolve_weights, weighted_residual, PathBatch, VectorField};
use crate::net::StateBatch;

/// Frozen copy of the pretrained field. There is no mutable access.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceField {
    field: VectorField,
}

impl ReferenceField {
    pub fn freeze(field: &VectorField) -> Self {
        ReferenceField { field: field.clone() }
    }

    pub fn field(&self) -> &VectorField {
        &self.field
    }

    pub fn eval(&self, states: &StateBatch) -> Result<Tensor> {
        self.field.eval(states)
    }
}

fn penalty_from_output(tape: &mut Tape, v: Var, reference: &ReferenceField, states: &StateBatch) -> Result<Var> {
    let r = tape.constant(reference.eval(states)?)?;
    let diff = tape.sub(v, r)?;
    let sq = tape.row_sq_norm(diff)?;
    Ok(tape.mean(sq)?)
}

/// Mean of `‖v_θ(t, x_t, c) − v_ref(t, x_t, c)‖²` over the probe states.
pub fn w2_penalty(tape: &mut Tape, field: &VectorField, reference: &ReferenceField, probes: &StateBatch) -> Result<Var> {
    if probes.is_empty() {
        return Err(CoreError::EmptyBatch("w2_penalty"));
    }
    let v = field.forward(tape, probes)?;
    penalty_from_output(tape, v, reference, probes)
}

/// Tape nodes of the actor objective; `total = cfm + α · w2`.
#[derive(Clone, Copy, Debug)]
pub struct ActorLoss {
    pub total: Var,
    pub cfm: Var,
    pub w2: Var,
}

/// Weighted CFM plus `alpha` times the W2 penalty on the same path states.
pub fn actor_loss(
    tape: &mut Tape,
    field: &VectorField,
    reference: &ReferenceField,
    batch: &PathBatch,
    weights: &[f64],
    alpha: f64,
) -> Result<ActorLoss> {
    if batch.is_empty() {
        return Err(CoreError::EmptyBatch("actor_loss"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(CoreError::InvalidInput(format!("alpha must be >= 0, got {alpha}")));
    }
    let weights = resolve_weights(batch.len(), Some(weights))?;
    let v = field.forward(tape, &batch.states)?;
    let cfm = weighted_residual(tape, v, &batch.u_t, &weights)?;
    let w2 = penalty_from_output(tape, v, reference, &batch.states)?;
    let total = if alpha == 0.0 {
        cfm
    } else {
        let scaled = tape.scale(w2, alpha)?;
        tape.add(cfm, scaled)?
    };
    Ok(ActorLoss { total, cfm, w2 })
}

/// Min-max shaping, or the raw rewards when shaping is disabled.
pub fn shape_rewards(raw: &[f64], cfg: &RunConfig) -> Result<ShapedRewards> {
    if cfg.reward_shaping {
        reward_shape(raw, cfg.epsilon)
    } else {
        ShapedRewards::passthrough(raw)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weighting {
    pub weights: WeightBatch,
    /// For outcome weighting these are the shaped rewards themselves.
    pub advantages: AdvantageBatch,
}

impl Weighting {
    pub fn source(&self) -> AdvantageSource {
        self.advantages.source
    }
}

/// The advantage source used in round `step` (1-based).
pub fn advantage_source(step: usize, cfg: &RunConfig) -> AdvantageSource {
    match cfg.weighting_mode {
        WeightingMode::OutcomeReward => AdvantageSource::OutcomeReward,
        WeightingMode::Grae => AdvantageSource::Grae,
        WeightingMode::CriticAdvantage if cfg.warmup && step <= cfg.warmup_k => AdvantageSource::Grae,
        WeightingMode::CriticAdvantage => AdvantageSource::CriticAdvantage,
    }
}

/// Loss weights for round `step`. `critic_states` are the states the critic
/// is evaluated on in the critic-advantage branch.
pub fn compute_weights(
    step: usize,
    cfg: &RunConfig,
    shaped: &ShapedRewards,
    critic: &ValueNet,
    critic_states: &StateBatch,
) -> Result<Weighting> {
    let advantages = match advantage_source(step, cfg) {
        AdvantageSource::OutcomeReward => {
            return Ok(Weighting {
                weights: outcome_weights(shaped, cfg.tau)?,
                advantages: AdvantageBatch {
                    values: shaped.shaped.clone(),
                    source: AdvantageSource::OutcomeReward,
                    delta: None,
                },
            });
        }
        AdvantageSource::Grae => grae_advantage(shaped, cfg.epsilon)?,
        AdvantageSource::CriticAdvantage => critic_advantage(shaped, critic, critic_states)?,
    };
    let advantages = if cfg.advantage_clipping {
        clip_advantage(&advantages, cfg.delta)?
    } else {
        advantages
    };
    Ok(Weighting {
        weights: gcw_weights(&advantages, cfg.tau)?,
        advantages,
    })
}
