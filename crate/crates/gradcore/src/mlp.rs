use rand::Rng;

use crate::error::{GradError, Result};
use crate::params::ParamStore;
use crate::tape::Graph;
use crate::tensor::Tensor;

/// Layer widths from input to output. Hidden layers use tanh; the output is linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub widths: Vec<usize>,
}

impl LayerSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        let spec = LayerSpec { widths };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(GradError::shape(
                "LayerSpec",
                format!("need at least two positive widths, got {:?}", self.widths),
            ));
        }
        Ok(())
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// A fully connected network whose parameters live under `prefix` in a [`ParamStore`].
///
/// Layer `i` stores `{prefix}l{i}.w` with shape `[in, out]` and `{prefix}l{i}.b` with shape `[out]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub spec: LayerSpec,
    pub prefix: String,
}

impl Mlp {
    pub fn new(spec: LayerSpec, prefix: impl Into<String>) -> Self {
        Mlp {
            spec,
            prefix: prefix.into(),
        }
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}l{layer}.b", self.prefix)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for layer in 0..self.spec.num_layers() {
            let (fan_in, fan_out) = (self.spec.widths[layer], self.spec.widths[layer + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            store.insert(self.weight_name(layer), Tensor::new(vec![fan_in, fan_out], w)?);
            store.insert(self.bias_name(layer), Tensor::zeros(&[fan_out]));
        }
        Ok(())
    }

    /// `[batch, input] -> [batch, output]`.
    pub fn forward<G: Graph>(&self, g: &mut G, store: &ParamStore, input: &G::Value) -> Result<G::Value> {
        let width = *g.value(input)?.shape().last().unwrap_or(&0);
        if width != self.spec.input() {
            return Err(GradError::shape(
                "mlp_forward",
                format!("input width {width}, network expects {}", self.spec.input()),
            ));
        }
        let last = self.spec.num_layers() - 1;
        let mut h = input.clone();
        for layer in 0..=last {
            let w = g.param(store, &self.weight_name(layer))?;
            let b = g.param(store, &self.bias_name(layer))?;
            let z = g.matmul(&h, &w)?;
            h = g.add_row(&z, &b)?;
            if layer != last {
                h = g.tanh(&h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Eval;

    #[test]
    fn identity_layer_is_identity() {
        let mlp = Mlp::new(LayerSpec::new(2, &[], 2).unwrap(), "");
        let mut store = ParamStore::new();
        store.insert("l0.w", Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
        store.insert("l0.b", Tensor::zeros(&[2]));
        let x = Tensor::new(vec![1, 2], vec![3., 4.]).unwrap();
        let y = mlp.forward(&mut Eval, &store, &x).unwrap();
        assert_eq!(y.data(), &[3., 4.]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mlp = Mlp::new(LayerSpec::new(2, &[], 2).unwrap(), "");
        let mut store = ParamStore::new();
        store.insert("l0.w", Tensor::zeros(&[2, 2]));
        store.insert("l0.b", Tensor::vector(&[1., 1.]).unwrap());
        let x = Tensor::new(vec![3, 2], vec![5., -2., 0.1, 9., 7., 7.]).unwrap();
        let y = mlp.forward(&mut Eval, &store, &x).unwrap();
        assert_eq!(y.data(), &[1.; 6]);
    }

    #[test]
    fn wrong_input_width_and_missing_params() {
        let mlp = Mlp::new(LayerSpec::new(3, &[4], 1).unwrap(), "net.");
        let store = ParamStore::new();
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            mlp.forward(&mut Eval, &store, &x),
            Err(GradError::ShapeMismatch { .. })
        ));
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            mlp.forward(&mut Eval, &store, &x),
            Err(GradError::MissingParam(_))
        ));
    }

    #[test]
    fn layer_spec_rejects_degenerate_widths() {
        assert!(LayerSpec::new(0, &[], 1).is_err());
        assert!(LayerSpec::new(2, &[0], 1).is_err());
        assert!(LayerSpec { widths: vec![3] }.validate().is_err());
    }
}
