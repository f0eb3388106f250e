//! Conditional flow matching: the linear probability path, the CFM regression
//! loss, Euler sampling and pretraining.

use gradcore::{optimizer_step, Checkpoint, Eval, Graph, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::net::{ConditionedNet, StateBatch};
use crate::task::{ConditionId, ToyTaskSpec};

pub const VECTOR_FIELD_KIND: &str = "vector_field";

/// One point on the linear path between a noise draw and a data draw.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub t: f64,
    pub x0: Tensor,
    pub x1: Tensor,
    pub x_t: Tensor,
    pub u_t: Tensor,
}

/// `x_t = (1 − t)·x0 + t·x1`, `u_t = x1 − x0`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<PathSample> {
    if x0.shape() != x1.shape() {
        return Err(CoreError::InvalidInput(format!(
            "interpolate: x0 {:?} vs x1 {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::InvalidInput(format!("interpolate: t = {t} outside [0, 1]")));
    }
    let x_t = x0.zip_map(x1, "interpolate", |a, b| (1.0 - t) * a + t * b)?;
    let u_t = x1.sub(x0)?;
    Ok(PathSample {
        t,
        x0: x0.clone(),
        x1: x1.clone(),
        x_t,
        u_t,
    })
}

/// A batch of path samples stored as `[batch, d]` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch {
    /// `(x_t, t, c)` per row.
    pub states: StateBatch,
    pub x0: Tensor,
    pub x1: Tensor,
    pub u_t: Tensor,
}

impl PathBatch {
    pub fn interpolate(x0: &Tensor, x1: &Tensor, ts: &[f64], conds: &[ConditionId]) -> Result<Self> {
        let (rows, d) = x0.dims2("PathBatch")?;
        if x1.shape() != x0.shape() {
            return Err(CoreError::InvalidInput(format!(
                "PathBatch: x0 {:?} vs x1 {:?}",
                x0.shape(),
                x1.shape()
            )));
        }
        if ts.len() != rows {
            return Err(CoreError::LengthMismatch {
                what: "PathBatch times",
                left: rows,
                right: ts.len(),
            });
        }
        let mut xt = Vec::with_capacity(rows * d);
        for (r, &t) in ts.iter().enumerate() {
            for (a, b) in x0.row(r).iter().zip(x1.row(r)) {
                xt.push((1.0 - t) * a + t * b);
            }
        }
        let states = StateBatch::new(Tensor::new(vec![rows, d], xt)?, ts.to_vec(), conds.to_vec())?;
        Ok(PathBatch {
            states,
            x0: x0.clone(),
            x1: x1.clone(),
            u_t: x1.sub(x0)?,
        })
    }

    pub fn from_samples(samples: &[(PathSample, ConditionId)]) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoreError::EmptyBatch("PathBatch"));
        }
        let rows = |f: fn(&PathSample) -> &Tensor| -> Result<Tensor> {
            let rows: Vec<&[f64]> = samples.iter().map(|(s, _)| f(s).data()).collect();
            Ok(Tensor::from_rows(&rows)?)
        };
        let ts = samples.iter().map(|(s, _)| s.t).collect();
        let conds = samples.iter().map(|(_, c)| *c).collect();
        Ok(PathBatch {
            states: StateBatch::new(rows(|s| &s.x_t)?, ts, conds)?,
            x0: rows(|s| &s.x0)?,
            x1: rows(|s| &s.x1)?,
            u_t: rows(|s| &s.u_t)?,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Anything that can be integrated by the Euler sampler.
pub trait Velocity {
    fn state_dim(&self) -> usize;

    /// `[batch, d]` velocities at a shared time `t`.
    fn velocity(&self, xs: &Tensor, t: f64, conds: &[ConditionId]) -> Result<Tensor>;
}

/// Adapts a closure `(t, x, c) -> v` for a single state into a [`Velocity`].
pub struct FnVelocity<F> {
    dim: usize,
    f: F,
}

impl<F> FnVelocity<F>
where
    F: Fn(f64, &[f64], ConditionId) -> Vec<f64>,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnVelocity { dim, f }
    }
}

impl<F> Velocity for FnVelocity<F>
where
    F: Fn(f64, &[f64], ConditionId) -> Vec<f64>,
{
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, xs: &Tensor, t: f64, conds: &[ConditionId]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = conds
            .iter()
            .enumerate()
            .map(|(r, &c)| (self.f)(t, xs.row(r), c))
            .collect();
        Ok(Tensor::from_rows(&rows)?.reshape(xs.shape().to_vec())?)
    }
}

/// The learned field `v_θ(t, x, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    net: ConditionedNet,
}

impl VectorField {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        vocab: usize,
        embed_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        Ok(VectorField {
            net: ConditionedNet::new(state_dim, vocab, embed_dim, hidden, state_dim, rng)?,
        })
    }

    pub fn for_task<R: Rng + ?Sized>(task: &ToyTaskSpec, cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        Self::new(task.dim(), task.vocab(), cfg.embed_dim, &cfg.field_hidden, rng)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != VECTOR_FIELD_KIND {
            return Err(CoreError::InvalidInput(format!(
                "expected a {VECTOR_FIELD_KIND} checkpoint, found `{}`",
                ckpt.kind
            )));
        }
        let net = ConditionedNet::from_checkpoint(ckpt)?;
        if net.output_dim() != net.state_dim() {
            return Err(CoreError::InvalidInput(
                "vector field output width must equal its state dimension".into(),
            ));
        }
        Ok(VectorField { net })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        self.net.to_checkpoint(VECTOR_FIELD_KIND)
    }

    pub fn net(&self) -> &ConditionedNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut ConditionedNet {
        &mut self.net
    }

    /// Records `v_θ` for every row of `states` on the tape, `[batch, d]`.
    pub fn forward(&self, tape: &mut Tape, states: &StateBatch) -> Result<Var> {
        self.net.forward(tape, states)
    }

    /// Evaluates `v_θ` without recording.
    pub fn eval(&self, states: &StateBatch) -> Result<Tensor> {
        self.net.forward(&mut Eval, states)
    }
}

impl Velocity for VectorField {
    fn state_dim(&self) -> usize {
        self.net.state_dim()
    }

    fn velocity(&self, xs: &Tensor, t: f64, conds: &[ConditionId]) -> Result<Tensor> {
        let states = StateBatch::new(xs.clone(), vec![t; conds.len()], conds.to_vec())?;
        self.eval(&states)
    }
}

/// Checks optional per-sample weights, defaulting to unit weights.
pub(crate) fn resolve_weights(len: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        Some(w) => {
            if w.len() != len {
                return Err(CoreError::LengthMismatch {
                    what: "cfm_loss weights",
                    left: len,
                    right: w.len(),
                });
            }
            if let Some(bad) = w.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
                return Err(CoreError::InvalidInput(format!(
                    "cfm_loss weights must be finite and >= 0, got {bad}"
                )));
            }
            Ok(w.to_vec())
        }
        None => Ok(vec![1.0; len]),
    }
}

/// `(1/n) Σ w_i ‖v_i − u_i‖²` for an already recorded field output `v`.
pub(crate) fn weighted_residual(tape: &mut Tape, v: Var, u_t: &Tensor, weights: &[f64]) -> Result<Var> {
    let target = tape.constant(u_t.clone())?;
    let diff = tape.sub(v, target)?;
    let sq = tape.row_sq_norm(diff)?;
    Ok(tape.weighted_mean(sq, weights)?)
}

/// Mean of `w_i · ‖v_θ(t_i, x_t_i, c_i) − u_t_i‖²`; unit weights when `weights` is `None`.
pub fn cfm_loss(tape: &mut Tape, field: &VectorField, batch: &PathBatch, weights: Option<&[f64]>) -> Result<Var> {
    if batch.is_empty() {
        return Err(CoreError::EmptyBatch("cfm_loss"));
    }
    let weights = resolve_weights(batch.len(), weights)?;
    let v = field.forward(tape, &batch.states)?;
    weighted_residual(tape, v, &batch.u_t, &weights)
}

/// Fixed-step Euler integration from `t0` with step `dt`.
///
/// `on_state(k, x)` sees every state including the initial one (`k = 0`). A
/// non-finite state is reported with the index of the step that produced it.
pub fn euler<V: Velocity + ?Sized>(
    field: &V,
    x0: &Tensor,
    conds: &[ConditionId],
    t0: f64,
    dt: f64,
    n_steps: usize,
    mut on_state: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let (rows, d) = x0.dims2("euler")?;
    if d != field.state_dim() {
        return Err(CoreError::InvalidInput(format!(
            "euler: state dimension {d} vs field dimension {}",
            field.state_dim()
        )));
    }
    if rows != conds.len() {
        return Err(CoreError::LengthMismatch {
            what: "euler conditions",
            left: rows,
            right: conds.len(),
        });
    }
    let mut x = x0.clone();
    on_state(0, &x);
    for k in 0..n_steps {
        // Clamp to guard the last step against rounding just past 1.
        let t = (t0 + k as f64 * dt).clamp(0.0, 1.0);
        let v = field.velocity(&x, t, conds).map_err(|e| match e {
            e if e.is_numeric() => CoreError::NonFiniteState { step: k + 1 },
            e => e,
        })?;
        let mut next = x.data().to_vec();
        for (n, dv) in next.iter_mut().zip(v.data()) {
            *n += dt * dv;
        }
        x = Tensor::new(vec![rows, d], next).map_err(|_| CoreError::NonFiniteState { step: k + 1 })?;
        on_state(k + 1, &x);
    }
    Ok(x)
}

/// Integrates one state from t = 0 to 1 and returns all `n_steps + 1` states.
pub fn sample_ode<V: Velocity + ?Sized>(field: &V, x0: &Tensor, c: ConditionId, n_steps: usize) -> Result<Vec<Tensor>> {
    if n_steps == 0 {
        return Err(CoreError::InvalidInput("sample_ode: n_steps must be >= 1".into()));
    }
    let d = x0.numel();
    let start = x0.clone().reshape(vec![1, d])?;
    let mut traj = Vec::with_capacity(n_steps + 1);
    euler(field, &start, &[c], 0.0, 1.0 / n_steps as f64, n_steps, |_, x| {
        traj.push(x.clone().reshape(x0.shape().to_vec()).expect("same size"));
    })?;
    Ok(traj)
}

/// Pushes a `[batch, d]` block of base draws through the flow, returning the `x_1` block.
pub fn sample_batch<V: Velocity + ?Sized>(field: &V, x0: &Tensor, conds: &[ConditionId], n_steps: usize) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(CoreError::InvalidInput("sample_batch: n_steps must be >= 1".into()));
    }
    euler(field, x0, conds, 0.0, 1.0 / n_steps as f64, n_steps, |_, _| {})
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub step: usize,
    pub loss: f64,
}

/// Draws a fresh CFM batch: `c ~ U(vocab)`, `x1 ~ q(·|c)`, `x0 ~ N(0, I)`, `t ~ U[0, 1]`.
pub fn draw_cfm_batch<R: Rng + ?Sized>(task: &ToyTaskSpec, batch_size: usize, rng: &mut R) -> Result<PathBatch> {
    let conds = task.sample_conditions(batch_size, rng);
    let d = task.dim();
    let mut x1 = Vec::with_capacity(batch_size * d);
    for &c in &conds {
        x1.extend(task.target(c)?.sample_one(rng));
    }
    let x1 = Tensor::new(vec![batch_size, d], x1)?;
    let x0 = task.sample_base(batch_size, rng);
    let ts: Vec<f64> = (0..batch_size).map(|_| rng.random_range(0.0..=1.0)).collect();
    PathBatch::interpolate(&x0, &x1, &ts, &conds)
}

/// Minimizes the unweighted CFM loss for `cfg.pretrain_steps` AdamW steps.
pub fn pretrain<R: Rng + ?Sized>(
    field: &mut VectorField,
    task: &ToyTaskSpec,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<Vec<PretrainRow>> {
    if cfg.pretrain_steps == 0 {
        return Err(CoreError::config("pretrain_steps", "must be >= 1"));
    }
    let opt = cfg.pretrain_optimizer();
    let mut rows = Vec::with_capacity(cfg.pretrain_steps);
    for step in 1..=cfg.pretrain_steps {
        let batch = draw_cfm_batch(task, cfg.pretrain_batch_size, rng)?;
        let mut tape = Tape::new();
        let loss = cfm_loss(&mut tape, field, &batch, None)?;
        let value = tape.item(loss)?;
        let grads = tape.backward(loss, field.net().params())?;
        optimizer_step(field.net_mut().params_mut(), &grads, &opt)?;
        rows.push(PretrainRow { step, loss: value });
    }
    Ok(rows)
}

/// CFM loss of `field` on `batch` without recording gradients.
pub fn cfm_loss_value(field: &VectorField, batch: &PathBatch, weights: Option<&[f64]>) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = cfm_loss(&mut tape, field, batch, weights)?;
    Ok(tape.item(loss)?)
}
