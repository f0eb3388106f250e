//! Run configuration: every hyperparameter of pretraining, fine-tuning and evaluation.

use gradcore::OptimizerConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::metrics::{RewardFn, RewardKind};
use crate::task::ToyTaskSpec;

/// Which quantity is exponentiated into per-sample weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    /// `exp(τ · r̃)`, the online reward-weighted regression baseline.
    OutcomeReward,
    /// `exp(τ · A_group)` every round.
    Grae,
    /// GRAE during warm-up, then `exp(τ · (r̃ − V))`.
    CriticAdvantage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Ring,
    #[serde(rename = "two_mode_1d")]
    TwoMode1d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardChoice {
    /// `−‖x − μ_c‖` with `μ_c` the first mixture component of condition `c`.
    ModeDistance,
    /// `−‖x − μ_c‖` with `μ_c` the mixture barycenter.
    BarycenterDistance,
    /// 1 inside a box of half-width `region_half_width` around the first component, else 0.
    RegionIndicator,
}

/// States the critic is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticStates {
    /// Interpolated path states `x_t = t·x1 + (1−t)·x0`.
    Path,
    /// Euler trajectory states at the grid time nearest each sampled `t`.
    Trajectory,
}

/// Which base draw the regression path is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathCoupling {
    /// The same `x0` the ODE started from.
    Trajectory,
    /// A fresh `x0 ~ p0`, independent of the generated `x1`.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub task: TaskKind,
    /// Mass of the left mode in the 1-D task.
    pub two_mode_weight_a: f64,
    pub reward: RewardChoice,
    /// Multiplier applied to every raw reward.
    pub reward_scale: f64,
    pub region_half_width: f64,

    pub field_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub embed_dim: usize,

    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,

    pub tau: f64,
    pub alpha: f64,
    pub delta: f64,
    pub warmup_k: usize,
    pub epsilon: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub finetune_steps: usize,
    pub ode_steps: usize,
    pub weighting_mode: WeightingMode,
    pub reward_shaping: bool,
    pub advantage_clipping: bool,
    pub warmup: bool,
    pub critic_updates_per_round: usize,
    pub critic_states: CriticStates,
    pub path_coupling: PathCoupling,

    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub clip_gradients: bool,

    pub eval_samples: usize,
    /// Write checkpoints every this many fine-tuning rounds; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            task: TaskKind::Ring,
            two_mode_weight_a: 0.5,
            reward: RewardChoice::ModeDistance,
            reward_scale: 1.0,
            region_half_width: 1.0,
            field_hidden: vec![64, 64, 64],
            critic_hidden: vec![32, 32],
            embed_dim: 8,
            pretrain_steps: 5000,
            pretrain_lr: 1e-3,
            pretrain_batch_size: 512,
            tau: 1.0,
            alpha: 1.0,
            delta: 5.0,
            warmup_k: 500,
            epsilon: 1e-6,
            actor_lr: 1e-4,
            critic_lr: 3e-4,
            batch_size: 256,
            finetune_steps: 1000,
            ode_steps: 50,
            weighting_mode: WeightingMode::CriticAdvantage,
            reward_shaping: true,
            advantage_clipping: true,
            warmup: true,
            critic_updates_per_round: 1,
            critic_states: CriticStates::Path,
            path_coupling: PathCoupling::Trajectory,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            clip_gradients: true,
            eval_samples: 512,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        fn positive(key: &'static str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CoreError::config(key, format!("must be > 0, got {v}")))
            }
        }
        fn non_negative(key: &'static str, v: f64) -> Result<()> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CoreError::config(key, format!("must be >= 0, got {v}")))
            }
        }
        fn at_least_one(key: &'static str, v: usize) -> Result<()> {
            if v >= 1 {
                Ok(())
            } else {
                Err(CoreError::config(key, "must be >= 1"))
            }
        }
        positive("tau", self.tau)?;
        non_negative("alpha", self.alpha)?;
        positive("delta", self.delta)?;
        positive("epsilon", self.epsilon)?;
        positive("actor_lr", self.actor_lr)?;
        positive("critic_lr", self.critic_lr)?;
        positive("pretrain_lr", self.pretrain_lr)?;
        positive("max_grad_norm", self.max_grad_norm)?;
        non_negative("weight_decay", self.weight_decay)?;
        positive("region_half_width", self.region_half_width)?;
        if !self.reward_scale.is_finite() || self.reward_scale == 0.0 {
            return Err(CoreError::config("reward_scale", "must be finite and non-zero"));
        }
        if !(self.two_mode_weight_a > 0.0 && self.two_mode_weight_a < 1.0) {
            return Err(CoreError::config("two_mode_weight_a", "must lie in (0, 1)"));
        }
        at_least_one("batch_size", self.batch_size)?;
        at_least_one("pretrain_batch_size", self.pretrain_batch_size)?;
        at_least_one("ode_steps", self.ode_steps)?;
        at_least_one("embed_dim", self.embed_dim)?;
        at_least_one("critic_updates_per_round", self.critic_updates_per_round)?;
        if self.eval_samples < 2 {
            return Err(CoreError::config("eval_samples", "must be >= 2"));
        }
        if self.field_hidden.contains(&0) {
            return Err(CoreError::config("field_hidden", "widths must be positive"));
        }
        if self.critic_hidden.contains(&0) {
            return Err(CoreError::config("critic_hidden", "widths must be positive"));
        }
        Ok(())
    }

    pub fn build_task(&self) -> Result<ToyTaskSpec> {
        match self.task {
            TaskKind::Ring => Ok(ToyTaskSpec::ring()),
            TaskKind::TwoMode1d => ToyTaskSpec::two_mode_1d(self.two_mode_weight_a),
        }
    }

    pub fn build_reward(&self, task: &ToyTaskSpec) -> RewardFn {
        let kind = match self.reward {
            RewardChoice::ModeDistance => RewardKind::ModeDistance {
                targets: task.conditions.iter().map(|m| m.means[0].clone()).collect(),
            },
            RewardChoice::BarycenterDistance => RewardKind::ModeDistance {
                targets: task.conditions.iter().map(|m| m.barycenter()).collect(),
            },
            RewardChoice::RegionIndicator => RewardKind::RegionIndicator {
                boxes: task
                    .conditions
                    .iter()
                    .map(|m| {
                        let c = &m.means[0];
                        let lo = c.iter().map(|v| v - self.region_half_width).collect();
                        let hi = c.iter().map(|v| v + self.region_half_width).collect();
                        (lo, hi)
                    })
                    .collect(),
            },
        };
        RewardFn {
            kind,
            scale: self.reward_scale,
        }
    }

    fn optimizer(&self, learning_rate: f64) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            clip_gradients: self.clip_gradients,
            ..OptimizerConfig::default()
        }
    }

    pub fn actor_optimizer(&self) -> OptimizerConfig {
        self.optimizer(self.actor_lr)
    }

    pub fn critic_optimizer(&self) -> OptimizerConfig {
        self.optimizer(self.critic_lr)
    }

    pub fn pretrain_optimizer(&self) -> OptimizerConfig {
        self.optimizer(self.pretrain_lr)
    }
}
