//! The online actor-critic loop and the reward-weighted regression round used
//! as a baseline.

use std::ops::ControlFlow;

use gradcore::{optimizer_step, Tape, Tensor};
use rand::Rng;

use super::advantage::{outcome_weights, AdvantageSource};
use super::loss::{actor_loss, advantage_source, compute_weights, shape_rewards, ReferenceField};
use super::telemetry::{finite, RoundTelemetry};
use crate::config::{CriticStates, PathCoupling, RunConfig};
use crate::critic::{critic_update, ShapedRewards, ValueNet};
use crate::error::{CoreError, Result};
use crate::flow::{euler, PathBatch, VectorField};
use crate::metrics::RewardFn;
use crate::net::StateBatch;
use crate::task::{ConditionId, ToyTaskSpec};
use crate::{stream_rng, RngStream};

/// Everything that persists across rounds.
#[derive(Clone, Debug)]
pub struct FinetuneState {
    pub field: VectorField,
    pub reference: ReferenceField,
    pub critic: ValueNet,
}

impl FinetuneState {
    /// Freezes `field` as the reference and draws a fresh critic. The actor
    /// starts with fresh optimizer state, as it would from a checkpoint.
    pub fn new<R: Rng + ?Sized>(mut field: VectorField, task: &ToyTaskSpec, cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        field.net_mut().params_mut().reset_optimizer_state();
        Ok(FinetuneState {
            reference: ReferenceField::freeze(&field),
            critic: ValueNet::for_task(task, cfg, rng)?,
            field,
        })
    }
}

/// One round's self-generated samples.
struct RoundBatch {
    path: PathBatch,
    raw: Vec<f64>,
    /// Euler states at the grid time nearest each `t`, when requested.
    grid_states: Option<StateBatch>,
}

fn generate<R: Rng + ?Sized>(
    field: &VectorField,
    task: &ToyTaskSpec,
    reward_fn: &RewardFn,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<RoundBatch> {
    let b = cfg.batch_size;
    let conds = task.sample_conditions(b, rng);
    let x0 = task.sample_base(b, rng);
    let keep = cfg.critic_states == CriticStates::Trajectory;
    let mut traj: Vec<Tensor> = Vec::new();
    let n = cfg.ode_steps;
    let x1 = euler(field, &x0, &conds, 0.0, 1.0 / n as f64, n, |_, x| {
        if keep {
            traj.push(x.clone());
        }
    })?;
    let raw = reward_fn.reward_batch(&x1, &conds)?;
    let ts: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..=1.0)).collect();
    let grid_states = if keep {
        let d = task.dim();
        let mut xs = Vec::with_capacity(b * d);
        let mut grid_ts = Vec::with_capacity(b);
        for (i, t) in ts.iter().enumerate() {
            let k = (t * n as f64).round() as usize;
            xs.extend_from_slice(traj[k].row(i));
            grid_ts.push(k as f64 / n as f64);
        }
        Some(StateBatch::new(Tensor::new(vec![b, d], xs)?, grid_ts, conds.clone())?)
    } else {
        None
    };
    let path = match cfg.path_coupling {
        PathCoupling::Trajectory => PathBatch::interpolate(&x0, &x1, &ts, &conds)?,
        PathCoupling::Independent => PathBatch::interpolate(&task.sample_base(b, rng), &x1, &ts, &conds)?,
    };
    Ok(RoundBatch { path, raw, grid_states })
}

/// One pass of the loop body: sample, score, critic step(s), weights, actor step.
///
/// Numeric failures do not error; they end the row early with `diagnostic` set
/// and leave the parameters as they were when the failure occurred.
pub fn finetune_round<R: Rng + ?Sized>(
    state: &mut FinetuneState,
    task: &ToyTaskSpec,
    reward_fn: &RewardFn,
    cfg: &RunConfig,
    step: usize,
    rng: &mut R,
) -> Result<RoundTelemetry> {
    if step == 0 {
        return Err(CoreError::InvalidInput("fine-tuning rounds are numbered from 1".into()));
    }
    let mut row = RoundTelemetry::empty(step, advantage_source(step, cfg));
    match run_round(state, task, reward_fn, cfg, step, rng, &mut row) {
        Ok(()) => Ok(row),
        Err(e) if e.is_numeric() => {
            row.diagnostic = Some(e.to_string());
            Ok(row)
        }
        Err(e) => Err(e),
    }
}

fn run_round<R: Rng + ?Sized>(
    state: &mut FinetuneState,
    task: &ToyTaskSpec,
    reward_fn: &RewardFn,
    cfg: &RunConfig,
    step: usize,
    rng: &mut R,
    row: &mut RoundTelemetry,
) -> Result<()> {
    let batch = generate(&state.field, task, reward_fn, cfg, rng)?;
    let shaped = shape_rewards(&batch.raw, cfg)?;
    row.reward_raw_mean = finite(shaped.raw_mean());
    row.reward_raw_min = finite(shaped.batch_min);
    row.reward_raw_max = finite(shaped.batch_max);
    row.reward_shaped_mean = finite(shaped.shaped_mean());

    let critic_states = batch.grid_states.as_ref().unwrap_or(&batch.path.states);
    let critic_opt = cfg.critic_optimizer();
    for k in 0..cfg.critic_updates_per_round {
        let loss = critic_update(&mut state.critic, critic_states, &shaped, &critic_opt)?;
        if k == 0 {
            row.critic_loss = finite(loss);
        }
    }

    let weighting = compute_weights(step, cfg, &shaped, &state.critic, critic_states)?;
    debug_assert_eq!(weighting.source(), row.adv_source);
    let w = &weighting.weights;
    row.w_min = Some(w.min());
    row.w_mean = Some(w.mean());
    row.w_max = Some(w.max());
    row.overflow_flag = w.overflow;

    let mut tape = Tape::new();
    let loss = actor_loss(&mut tape, &state.field, &state.reference, &batch.path, &w.values, cfg.alpha)?;
    row.w2_penalty = finite(tape.item(loss.w2)?);
    row.actor_loss = finite(tape.item(loss.total)?);
    let grads = tape.backward(loss.total, state.field.net().params())?;
    optimizer_step(state.field.net_mut().params_mut(), &grads, &cfg.actor_optimizer())?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub field: VectorField,
    pub critic: ValueNet,
    pub reference: ReferenceField,
    pub telemetry: Vec<RoundTelemetry>,
    /// True when a round hit a numeric failure and the run stopped early.
    pub diverged: bool,
}

/// Runs `cfg.finetune_steps` rounds from `field`. `observer` sees every row
/// right after it is produced and may stop the run.
pub fn finetune(
    field: VectorField,
    task: &ToyTaskSpec,
    reward_fn: &RewardFn,
    cfg: &RunConfig,
    mut observer: impl FnMut(&RoundTelemetry, &FinetuneState) -> ControlFlow<()>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let mut state = FinetuneState::new(field, task, cfg, &mut stream_rng(cfg.seed, RngStream::CriticInit))?;
    let mut rng = stream_rng(cfg.seed, RngStream::Finetune);
    let mut telemetry = Vec::with_capacity(cfg.finetune_steps);
    let mut diverged = false;
    for step in 1..=cfg.finetune_steps {
        let row = finetune_round(&mut state, task, reward_fn, cfg, step, &mut rng)?;
        diverged = row.diverged();
        let flow = observer(&row, &state);
        telemetry.push(row);
        if diverged || flow.is_break() {
            break;
        }
    }
    Ok(FinetuneOutcome {
        field: state.field,
        critic: state.critic,
        reference: state.reference,
        telemetry,
        diverged,
    })
}

/// Fits `field` to the reward-tilted distribution of a frozen `sampler`:
/// every step draws a fresh batch from `sampler`, weights it by
/// `exp(τ · r̃)` and takes one weighted CFM step. With `cfg.alpha > 0` the
/// penalty pulls toward `sampler`. Returns the per-step actor losses.
pub fn rwr_fit_round<R: Rng + ?Sized>(
    field: &mut VectorField,
    sampler: &VectorField,
    task: &ToyTaskSpec,
    reward_fn: &RewardFn,
    cfg: &RunConfig,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let reference = ReferenceField::freeze(sampler);
    let opt = cfg.actor_optimizer();
    let mut losses = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let batch = generate(sampler, task, reward_fn, cfg, rng)?;
        let shaped: ShapedRewards = shape_rewards(&batch.raw, cfg)?;
        let w = outcome_weights(&shaped, cfg.tau)?;
        let mut tape = Tape::new();
        let loss = actor_loss(&mut tape, field, &reference, &batch.path, &w.values, cfg.alpha)?;
        losses.push(tape.item(loss.total)?);
        let grads = tape.backward(loss.total, field.net().params())?;
        optimizer_step(field.net_mut().params_mut(), &grads, &opt)?;
    }
    Ok(losses)
}

/// Mass of `samples` falling in each condition's reward region, as used by the
/// mode-counting oracle: the fraction of rows with a positive reward.
pub fn region_mass(reward_fn: &RewardFn, samples: &Tensor, c: ConditionId) -> Result<f64> {
    let (n, _) = samples.dims2("region_mass")?;
    let rewards = reward_fn.reward_batch(samples, &vec![c; n])?;
    Ok(rewards.iter().filter(|r| **r > 0.0).count() as f64 / n as f64)
}

/// Advantage sources seen in a telemetry log, in order.
pub fn sources(log: &[RoundTelemetry]) -> Vec<AdvantageSource> {
    log.iter().map(|r| r.adv_source).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RewardChoice, WeightingMode};

    fn small_cfg() -> RunConfig {
        RunConfig {
            field_hidden: vec![16],
            critic_hidden: vec![16],
            batch_size: 16,
            ode_steps: 4,
            finetune_steps: 6,
            warmup_k: 3,
            ..RunConfig::default()
        }
    }

    fn setup(cfg: &RunConfig) -> (VectorField, ToyTaskSpec, RewardFn) {
        let task = cfg.build_task().unwrap();
        let field = VectorField::for_task(&task, cfg, &mut stream_rng(cfg.seed, RngStream::FieldInit)).unwrap();
        let reward = cfg.build_reward(&task);
        (field, task, reward)
    }

    fn run(cfg: &RunConfig) -> FinetuneOutcome {
        let (field, task, reward) = setup(cfg);
        finetune(field, &task, &reward, cfg, |_, _| ControlFlow::Continue(())).unwrap()
    }

    #[test]
    fn zero_rounds_leave_field_unchanged() {
        let cfg = RunConfig { finetune_steps: 0, ..small_cfg() };
        let (field, _, _) = setup(&cfg);
        let out = run(&cfg);
        assert!(out.telemetry.is_empty());
        assert_eq!(out.field, field);
        assert_eq!(out.reference.field(), &field);
    }

    #[test]
    fn runs_are_bit_identical() {
        let cfg = small_cfg();
        let a = run(&cfg);
        let b = run(&cfg);
        assert_eq!(
            serde_json::to_string(&a.telemetry).unwrap(),
            serde_json::to_string(&b.telemetry).unwrap()
        );
        assert_eq!(a.field.to_checkpoint().encode(), b.field.to_checkpoint().encode());
    }

    #[test]
    fn branch_purity_and_reference_immutability() {
        let cfg = small_cfg();
        let (field, _, _) = setup(&cfg);
        let before = field.to_checkpoint().encode();
        let out = run(&cfg);
        assert_eq!(out.telemetry.len(), 6);
        for row in &out.telemetry {
            let expected = if row.step <= 3 {
                AdvantageSource::Grae
            } else {
                AdvantageSource::CriticAdvantage
            };
            assert_eq!(row.adv_source, expected);
            assert!(!row.diverged());
        }
        assert_eq!(out.reference.field().to_checkpoint().encode(), before);
        assert_ne!(out.field.to_checkpoint().encode(), before);
    }

    #[test]
    fn tiny_temperature_flattens_weights() {
        let cfg = RunConfig {
            tau: 1e-8,
            alpha: 0.0,
            ..small_cfg()
        };
        for row in run(&cfg).telemetry {
            assert!(row.w_max.unwrap() - row.w_min.unwrap() < 1e-6);
        }
    }

    #[test]
    fn outcome_mode_plumbing() {
        let cfg = RunConfig {
            weighting_mode: WeightingMode::OutcomeReward,
            ..small_cfg()
        };
        assert!(run(&cfg).telemetry.iter().all(|r| r.adv_source == AdvantageSource::OutcomeReward));
    }

    #[test]
    fn unstabilized_large_rewards_overflow() {
        let cfg = RunConfig {
            reward: RewardChoice::RegionIndicator,
            region_half_width: 8.0,
            reward_scale: 1000.0,
            reward_shaping: false,
            advantage_clipping: false,
            warmup: false,
            ..small_cfg()
        };
        let out = run(&cfg);
        assert!(out.telemetry.iter().any(|r| r.overflow_flag));
    }

    #[test]
    fn trajectory_critic_states() {
        let cfg = RunConfig {
            critic_states: CriticStates::Trajectory,
            critic_updates_per_round: 2,
            ..small_cfg()
        };
        let out = run(&cfg);
        assert_eq!(out.telemetry.len(), 6);
        assert!(out.telemetry.iter().all(|r| r.critic_loss.is_some()));
    }

    #[test]
    fn path_coupling_choice() {
        let mut cfg = small_cfg();
        let (mut field, task, reward) = setup(&cfg);
        let zeroed: Vec<(String, Tensor)> = field
            .net()
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect();
        for (name, t) in zeroed {
            field.net_mut().params_mut().set(&name, t).unwrap();
        }
        // A zero field leaves x1 = x0, so the coupled path has no displacement.
        let batch = generate(&field, &task, &reward, &cfg, &mut stream_rng(1, RngStream::Finetune)).unwrap();
        assert!(batch.path.u_t.data().iter().all(|u| *u == 0.0));
        cfg.path_coupling = PathCoupling::Independent;
        let batch = generate(&field, &task, &reward, &cfg, &mut stream_rng(1, RngStream::Finetune)).unwrap();
        assert!(batch.path.u_t.data().iter().all(|u| *u != 0.0));
    }

    #[test]
    fn observer_can_stop_the_run() {
        let cfg = small_cfg();
        let (field, task, reward) = setup(&cfg);
        let out = finetune(field, &task, &reward, &cfg, |row, _| {
            if row.step == 2 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap();
        assert_eq!(out.telemetry.len(), 2);
    }
}
