//! Toy reward functions and evaluation metrics.

use std::cmp::Ordering;

use gradcore::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flow::{sample_batch, Velocity};
use crate::task::{ConditionId, ToyTaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardKind {
    /// `−‖x − μ_c‖` with one target point per condition.
    ModeDistance { targets: Vec<Vec<f64>> },
    /// 1 inside the axis-aligned box `[lo, hi]` of condition `c`, else 0.
    RegionIndicator { boxes: Vec<(Vec<f64>, Vec<f64>)> },
}

/// Terminal reward `r(x_1, c)`, multiplied by `scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardFn {
    pub kind: RewardKind,
    pub scale: f64,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn missing(c: ConditionId, vocab: usize) -> CoreError {
    CoreError::InvalidCondition { id: c.0, vocab }
}

/// `−‖x − targets[c]‖`.
pub fn mode_distance_reward(x: &[f64], c: ConditionId, targets: &[Vec<f64>]) -> Result<f64> {
    let mu = targets.get(c.0).ok_or_else(|| missing(c, targets.len()))?;
    if mu.len() != x.len() {
        return Err(CoreError::InvalidInput(format!(
            "reward target has dimension {}, state has {}",
            mu.len(),
            x.len()
        )));
    }
    Ok(-euclidean(x, mu))
}

impl RewardFn {
    pub fn mode_distance(targets: Vec<Vec<f64>>) -> Self {
        RewardFn {
            kind: RewardKind::ModeDistance { targets },
            scale: 1.0,
        }
    }

    pub fn region_indicator(boxes: Vec<(Vec<f64>, Vec<f64>)>) -> Self {
        RewardFn {
            kind: RewardKind::RegionIndicator { boxes },
            scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn reward(&self, x: &[f64], c: ConditionId) -> Result<f64> {
        let r = match &self.kind {
            RewardKind::ModeDistance { targets } => mode_distance_reward(x, c, targets)?,
            RewardKind::RegionIndicator { boxes } => {
                let (lo, hi) = boxes.get(c.0).ok_or_else(|| missing(c, boxes.len()))?;
                if lo.len() != x.len() || hi.len() != x.len() {
                    return Err(CoreError::InvalidInput(format!(
                        "reward box has dimension {}, state has {}",
                        lo.len(),
                        x.len()
                    )));
                }
                let inside = x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| *l <= *v && *v <= *h);
                if inside {
                    1.0
                } else {
                    0.0
                }
            }
        };
        Ok(self.scale * r)
    }

    /// One reward per row of a `[n, d]` block.
    pub fn reward_batch(&self, xs: &Tensor, conds: &[ConditionId]) -> Result<Vec<f64>> {
        let (rows, _) = xs.dims2("reward_batch")?;
        if rows != conds.len() {
            return Err(CoreError::LengthMismatch {
                what: "reward_batch conditions",
                left: rows,
                right: conds.len(),
            });
        }
        conds.iter().enumerate().map(|(r, &c)| self.reward(xs.row(r), c)).collect()
    }
}

/// Mean L2 distance over all unordered pairs of rows of a `[n, d]` block.
pub fn diversity_score(samples: &Tensor) -> Result<f64> {
    let (n, _) = samples.dims2("diversity_score")?;
    if n < 2 {
        return Err(CoreError::InvalidInput(format!("diversity needs >= 2 samples, got {n}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += euclidean(samples.row(i), samples.row(j));
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

fn mean_cross_distance(a: &Tensor, b: &Tensor) -> f64 {
    let (n, m) = (a.shape()[0], b.shape()[0]);
    let mut total = 0.0;
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            total += euclidean(ai, b.row(j));
        }
    }
    total / (n * m) as f64
}

fn canonical_order(a: &Tensor, b: &Tensor) -> Ordering {
    a.shape().cmp(b.shape()).then_with(|| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// `2·E‖a − b‖ − E‖a − a′‖ − E‖b − b′‖` with every expectation taken over all
/// `n²` ordered pairs, so `energy_distance(a, a) == 0`.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, da) = a.dims2("energy_distance")?;
    let (m, db) = b.dims2("energy_distance")?;
    if n == 0 || m == 0 {
        return Err(CoreError::EmptyBatch("energy_distance"));
    }
    if da != db {
        return Err(CoreError::InvalidInput(format!(
            "energy_distance: dimension {da} vs {db}"
        )));
    }
    // Fix the operand order of the cross term so the result is exactly symmetric.
    let (first, second) = match canonical_order(a, b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let cross = mean_cross_distance(first, second);
    let within = mean_cross_distance(a, a) + mean_cross_distance(b, b);
    Ok(2.0 * cross - within)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: ConditionId,
    pub mean_reward: f64,
    pub diversity: f64,
    pub energy_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mean_reward: f64,
    /// Per-condition diversity averaged with equal condition weights.
    pub diversity: f64,
    /// Mean over conditions of the energy distance to fresh target draws.
    pub energy_distance: Option<f64>,
    /// Samples per condition.
    pub sample_count: usize,
    pub per_condition: Vec<ConditionReport>,
}

/// Generated samples behind a [`MetricReport`], grouped by condition.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSamples {
    pub conds: Vec<ConditionId>,
    /// `[n, d]`.
    pub xs: Tensor,
    pub rewards: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub n_samples: usize,
    pub ode_steps: usize,
    pub energy_distance: bool,
}

/// Samples `n_samples` per condition and scores them. Base draws for all
/// conditions are taken first, then the reference target draws.
pub fn evaluate<V: Velocity + ?Sized, R: Rng + ?Sized>(
    field: &V,
    task: &ToyTaskSpec,
    reward_fn: &RewardFn,
    opts: EvalOptions,
    rng: &mut R,
) -> Result<(MetricReport, EvalSamples)> {
    let n = opts.n_samples;
    if n < 2 {
        return Err(CoreError::InvalidInput(format!("evaluate needs >= 2 samples, got {n}")));
    }
    let d = task.dim();
    let bases: Vec<Tensor> = (0..task.vocab()).map(|_| task.sample_base(n, rng)).collect();
    let mut per_condition = Vec::with_capacity(task.vocab());
    let mut all_conds = Vec::with_capacity(n * task.vocab());
    let mut all_xs = Vec::with_capacity(n * task.vocab() * d);
    let mut all_rewards = Vec::with_capacity(n * task.vocab());
    for (id, x0) in bases.iter().enumerate() {
        let c = ConditionId(id);
        let conds = vec![c; n];
        let xs = sample_batch(field, x0, &conds, opts.ode_steps)?;
        let rewards = reward_fn.reward_batch(&xs, &conds)?;
        let energy = if opts.energy_distance {
            let target = task.sample_target(c, n, rng)?;
            Some(energy_distance(&xs, &target)?)
        } else {
            None
        };
        per_condition.push(ConditionReport {
            condition: c,
            mean_reward: rewards.iter().sum::<f64>() / n as f64,
            diversity: diversity_score(&xs)?,
            energy_distance: energy,
        });
        all_conds.extend(conds);
        all_xs.extend_from_slice(xs.data());
        all_rewards.extend(rewards);
    }
    let k = per_condition.len() as f64;
    let report = MetricReport {
        mean_reward: all_rewards.iter().sum::<f64>() / all_rewards.len() as f64,
        diversity: per_condition.iter().map(|p| p.diversity).sum::<f64>() / k,
        energy_distance: if opts.energy_distance {
            Some(per_condition.iter().filter_map(|p| p.energy_distance).sum::<f64>() / k)
        } else {
            None
        },
        sample_count: n,
        per_condition,
    };
    let samples = EvalSamples {
        conds: all_conds,
        xs: Tensor::new(vec![all_rewards.len(), d], all_xs)?,
        rewards: all_rewards,
    };
    Ok((report, samples))
}
