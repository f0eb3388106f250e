//! AdamW with optional global-norm clipping.

use crate::error::{GradError, Result};
use crate::params::{clip_grad_norm, Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    /// Clip to `max_grad_norm` inside [`optimizer_step`].
    pub clip_gradients: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
            clip_gradients: true,
        }
    }
}

impl OptimizerConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GradError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad(format!("adam_epsilon must be > 0, got {}", self.adam_epsilon));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.max_grad_norm > 0.0 && self.max_grad_norm.is_finite()) {
            return bad(format!("max_grad_norm must be > 0, got {}", self.max_grad_norm));
        }
        Ok(())
    }
}

/// One AdamW step: bias-corrected adaptive update, then decoupled decay
/// `p <- p - lr * weight_decay * p`. The store is left untouched on error.
pub fn optimizer_step(store: &mut ParamStore, grads: &Gradients, cfg: &OptimizerConfig) -> Result<()> {
    cfg.validate()?;
    for (name, param) in store.iter() {
        match grads.get(name) {
            Some(g) if g.shape() == param.shape() => {}
            Some(g) => {
                return Err(GradError::shape(
                    "optimizer_step",
                    format!("{name}: param {:?} vs grad {:?}", param.shape(), g.shape()),
                ))
            }
            None => return Err(GradError::MissingParam(name.to_string())),
        }
    }
    let clipped;
    let grads = if cfg.clip_gradients {
        clipped = clip_grad_norm(grads, cfg.max_grad_norm)?;
        &clipped
    } else {
        grads
    };

    let t = (store.step() + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lr = cfg.learning_rate;

    let mut staged = Vec::with_capacity(store.len());
    for (name, param) in store.params_mut().iter() {
        let g = grads.get(name).expect("checked above").data();
        let n = g.len();
        let (mut p, mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let mi = cfg.beta1 * param.first_moment.data()[i] + (1.0 - cfg.beta1) * g[i];
            let vi = cfg.beta2 * param.second_moment.data()[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let mut pi = param.value.data()[i] - lr * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
            pi -= lr * cfg.weight_decay * pi;
            p.push(pi);
            m.push(mi);
            v.push(vi);
        }
        let shape = param.value.shape().to_vec();
        staged.push((
            name.clone(),
            Tensor::computed("optimizer_step", shape.clone(), p)?,
            Tensor::computed("optimizer_step", shape.clone(), m)?,
            Tensor::computed("optimizer_step", shape, v)?,
        ));
    }
    let params = store.params_mut();
    for (name, p, m, v) in staged {
        let slot = params.get_mut(&name).expect("name from store");
        slot.value = p;
        slot.first_moment = m;
        slot.second_moment = v;
    }
    store.bump_step();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(&[v]).unwrap());
        s
    }

    fn grad(v: f64) -> Gradients {
        let mut g = Gradients::new();
        g.insert("p", Tensor::vector(&[v]).unwrap());
        g
    }

    #[test]
    fn zero_gradient_is_a_no_op_that_counts() {
        let mut s = scalar_store(0.3);
        let before = s.get("p").unwrap().clone();
        optimizer_step(&mut s, &grad(0.0), &OptimizerConfig::default()).unwrap();
        assert_eq!(s.get("p").unwrap(), &before);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(0.0);
        let cfg = OptimizerConfig::with_lr(1e-4);
        optimizer_step(&mut s, &grad(1.0), &cfg).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let p = s.get("p").unwrap().data()[0];
        assert!((p + 1e-4).abs() < 1e-9, "{p}");
        let closed_form = -1e-4 / (1.0 + 1e-8);
        assert!((p - closed_form).abs() < 1e-18);
    }

    #[test]
    fn pure_decoupled_decay() {
        let mut s = scalar_store(1.0);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.1,
            ..Default::default()
        };
        optimizer_step(&mut s, &grad(0.0), &cfg).unwrap();
        assert!((s.get("p").unwrap().data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn clipping_is_applied_inside_the_step() {
        // With clipping the first step still has |m_hat / sqrt(v_hat)| = 1, but the
        // second-step ratio depends on the clipped magnitudes.
        let cfg = OptimizerConfig::with_lr(1e-2);
        let unclipped = OptimizerConfig {
            clip_gradients: false,
            ..cfg.clone()
        };
        let mut a = scalar_store(0.0);
        let mut b = scalar_store(0.0);
        for g in [100.0, 0.5] {
            optimizer_step(&mut a, &grad(g), &cfg).unwrap();
            optimizer_step(&mut b, &grad(g), &unclipped).unwrap();
        }
        assert_ne!(a.get("p").unwrap(), b.get("p").unwrap());
    }

    #[test]
    fn rejects_mismatched_or_missing_gradients() {
        let mut s = scalar_store(0.0);
        let mut g = Gradients::new();
        g.insert("p", Tensor::vector(&[1.0, 2.0]).unwrap());
        assert!(optimizer_step(&mut s, &g, &OptimizerConfig::default()).is_err());
        assert!(optimizer_step(&mut s, &Gradients::new(), &OptimizerConfig::default()).is_err());
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn rejects_invalid_config() {
        let mut s = scalar_store(0.0);
        let cfg = OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            optimizer_step(&mut s, &grad(1.0), &cfg),
            Err(GradError::InvalidConfig(_))
        ));
    }

    #[test]
    fn non_finite_update_leaves_store_untouched() {
        let mut s = scalar_store(f64::MAX);
        let before = s.clone();
        // A first step moves by ~lr, which pushes MAX past the representable range.
        let huge = OptimizerConfig {
            learning_rate: f64::MAX,
            ..Default::default()
        };
        let err = optimizer_step(&mut s, &grad(-1.0), &huge);
        assert!(matches!(err, Err(GradError::NonFinite { .. })));
        assert_eq!(s, before);
    }
}
