//! Actor-critic fine-tuning of a pretrained vector field.

pub mod advantage;
pub mod engine;
pub mod loss;
pub mod telemetry;

pub use advantage::{
    clip_advantage, critic_advantage, gcw_weights, grae_advantage, outcome_weights, AdvantageBatch, AdvantageSource,
    WeightBatch,
};
pub use engine::{finetune, finetune_round, region_mass, rwr_fit_round, sources, FinetuneOutcome, FinetuneState};
pub use loss::{
    actor_loss, advantage_source, compute_weights, shape_rewards, w2_penalty, ActorLoss, ReferenceField, Weighting,
};
pub use telemetry::RoundTelemetry;
