//! The value network `V_φ(x_t, t, c)`, min-max reward shaping and value regression.

use gradcore::{optimizer_step, Checkpoint, Eval, Graph, OptimizerConfig, Tape, Tensor, Var};
use rand::Rng;

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::net::{ConditionedNet, StateBatch};
use crate::task::{ConditionId, ToyTaskSpec};

pub const VALUE_NET_KIND: &str = "value_net";

/// Per-round rewards and the regression targets derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapedRewards {
    pub raw: Vec<f64>,
    pub shaped: Vec<f64>,
    pub batch_min: f64,
    pub batch_max: f64,
    pub epsilon: f64,
}

fn check_rewards(raw: &[f64]) -> Result<(f64, f64)> {
    if raw.is_empty() {
        return Err(CoreError::EmptyBatch("reward_shape"));
    }
    if let Some(r) = raw.iter().find(|r| !r.is_finite()) {
        return Err(CoreError::InvalidInput(format!("non-finite reward {r}")));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((min, max))
}

/// `(r − min) / (max − min + ε)` over the batch.
pub fn reward_shape(raw: &[f64], epsilon: f64) -> Result<ShapedRewards> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(CoreError::InvalidInput(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (min, max) = check_rewards(raw)?;
    let denom = (max - min) + epsilon;
    let shaped = raw.iter().map(|r| ((r - min) / denom).clamp(0.0, 1.0)).collect();
    Ok(ShapedRewards {
        raw: raw.to_vec(),
        shaped,
        batch_min: min,
        batch_max: max,
        epsilon,
    })
}

impl ShapedRewards {
    /// Targets equal to the raw rewards, for runs with shaping disabled.
    pub fn passthrough(raw: &[f64]) -> Result<Self> {
        let (min, max) = check_rewards(raw)?;
        Ok(ShapedRewards {
            raw: raw.to_vec(),
            shaped: raw.to_vec(),
            batch_min: min,
            batch_max: max,
            epsilon: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.shaped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shaped.is_empty()
    }

    pub fn raw_mean(&self) -> f64 {
        self.raw.iter().sum::<f64>() / self.raw.len() as f64
    }

    pub fn shaped_mean(&self) -> f64 {
        self.shaped.iter().sum::<f64>() / self.shaped.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueNet {
    net: ConditionedNet,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        vocab: usize,
        embed_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ValueNet {
            net: ConditionedNet::new(state_dim, vocab, embed_dim, hidden, 1, rng)?,
        })
    }

    pub fn for_task<R: Rng + ?Sized>(task: &ToyTaskSpec, cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        Self::new(task.dim(), task.vocab(), cfg.embed_dim, &cfg.critic_hidden, rng)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != VALUE_NET_KIND {
            return Err(CoreError::InvalidInput(format!(
                "expected a {VALUE_NET_KIND} checkpoint, found `{}`",
                ckpt.kind
            )));
        }
        let net = ConditionedNet::from_checkpoint(ckpt)?;
        if net.output_dim() != 1 {
            return Err(CoreError::InvalidInput("value net must have a single output".into()));
        }
        Ok(ValueNet { net })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.net.to_checkpoint(VALUE_NET_KIND)
    }

    pub fn net(&self) -> &ConditionedNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut ConditionedNet {
        &mut self.net
    }

    /// `[batch]` value estimates recorded on the tape.
    pub fn forward(&self, tape: &mut Tape, states: &StateBatch) -> Result<Var> {
        self.net.forward(tape, states)
    }

    pub fn predict_batch(&self, states: &StateBatch) -> Result<Vec<f64>> {
        Ok(self.net.forward(&mut Eval, states)?.into_data())
    }
}

pub fn value_predict(net: &ValueNet, x: &[f64], t: f64, c: ConditionId) -> Result<f64> {
    let states = StateBatch::new(Tensor::new(vec![1, x.len()], x.to_vec())?, vec![t], vec![c])?;
    Ok(net.predict_batch(&states)?[0])
}

/// Mean of `(V_φ(x_t, t, c) − target)²`.
pub fn critic_loss(tape: &mut Tape, net: &ValueNet, states: &StateBatch, targets: &ShapedRewards) -> Result<Var> {
    if states.is_empty() {
        return Err(CoreError::EmptyBatch("critic_loss"));
    }
    if states.len() != targets.len() {
        return Err(CoreError::LengthMismatch {
            what: "critic_loss targets",
            left: states.len(),
            right: targets.len(),
        });
    }
    let v = net.forward(tape, states)?;
    let y = tape.constant(Tensor::new(vec![targets.len(), 1], targets.shaped.clone())?)?;
    let diff = tape.sub(v, y)?;
    let sq = tape.row_sq_norm(diff)?;
    Ok(tape.mean(sq)?)
}

/// One optimizer step on the critic; returns the loss before the step.
pub fn critic_update(
    net: &mut ValueNet,
    states: &StateBatch,
    targets: &ShapedRewards,
    cfg: &OptimizerConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = critic_loss(&mut tape, net, states, targets)?;
    let value = tape.item(loss)?;
    let grads = tape.backward(loss, net.net().params())?;
    optimizer_step(net.net_mut().params_mut(), &grads, cfg)?;
    Ok(value)
}
