use std::collections::BTreeMap;

use crate::error::{GradError, Result};
use crate::tensor::Tensor;

/// A trainable tensor with its AdamW moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub(crate) first_moment: Tensor,
    pub(crate) second_moment: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let first_moment = Tensor::zeros(value.shape());
        let second_moment = Tensor::zeros(value.shape());
        Param {
            value,
            first_moment,
            second_moment,
        }
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.second_moment
    }
}

/// Named parameters, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| GradError::MissingParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    /// Replaces a parameter value, keeping its shape. Moments are reset.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| GradError::MissingParam(name.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(GradError::shape(
                "ParamStore::set",
                format!("{name}: {:?} vs {:?}", slot.value.shape(), value.shape()),
            ));
        }
        *slot = Param::new(value);
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Param> {
        &mut self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Number of optimizer steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Zeroes every moment accumulator and the step counter, keeping values.
    pub fn reset_optimizer_state(&mut self) {
        for p in self.params.values_mut() {
            *p = Param::new(p.value.clone());
        }
        self.step = 0;
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }
}

/// Gradient per parameter name, shape-congruent with the store that produced it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    /// All-zero gradients for every parameter of `store`.
    pub fn zeros_like(store: &ParamStore) -> Self {
        let grads = store
            .iter()
            .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape())))
            .collect();
        Gradients { grads }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, t)| (k.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Global L2 norm over every entry of every tensor.
    ///
    /// Computed with a max-abs rescale so gradients near `f64::MAX` do not
    /// overflow the sum of squares.
    pub fn global_norm(&self) -> f64 {
        let max_abs = self.grads.values().fold(0.0_f64, |m, g| m.max(g.max_abs()));
        if max_abs == 0.0 {
            return 0.0;
        }
        let scaled: f64 = self
            .grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let s = v / max_abs;
                s * s
            })
            .sum();
        max_abs * scaled.sqrt()
    }

    pub fn scale(&self, s: f64) -> Result<Gradients> {
        let grads = self
            .grads
            .iter()
            .map(|(k, g)| Ok((k.clone(), g.scale(s)?)))
            .collect::<Result<_>>()?;
        Ok(Gradients { grads })
    }
}

/// Rescales every gradient by `max_norm / g` when the global norm `g` exceeds `max_norm`.
pub fn clip_grad_norm(grads: &Gradients, max_norm: f64) -> Result<Gradients> {
    if !(max_norm > 0.0 && max_norm.is_finite()) {
        return Err(GradError::InvalidConfig(format!(
            "max_norm must be positive and finite, got {max_norm}"
        )));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(GradError::NonFinite {
            op: "clip_grad_norm",
        });
    }
    if norm <= max_norm {
        return Ok(grads.clone());
    }
    grads.scale(max_norm / norm)
}
