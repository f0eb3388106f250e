//! The network body shared by the vector field and the value network:
//! `[x, t, sin 2πt, cos 2πt, embed(c)] -> MLP`.

use std::f64::consts::PI;

use gradcore::{Checkpoint, Graph, LayerSpec, Mlp, ParamStore, Tensor};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::task::ConditionId;

pub const TIME_FEATURES: usize = 3;
pub const EMBED_PARAM: &str = "embed";
const MLP_PREFIX: &str = "mlp.";

/// A batch of `(x, t, c)` network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBatch {
    /// `[batch, d]`.
    pub xs: Tensor,
    pub ts: Vec<f64>,
    pub conds: Vec<ConditionId>,
}

impl StateBatch {
    pub fn new(xs: Tensor, ts: Vec<f64>, conds: Vec<ConditionId>) -> Result<Self> {
        let (rows, _) = xs.dims2("StateBatch")?;
        if rows != ts.len() {
            return Err(CoreError::LengthMismatch {
                what: "StateBatch times",
                left: rows,
                right: ts.len(),
            });
        }
        if rows != conds.len() {
            return Err(CoreError::LengthMismatch {
                what: "StateBatch conditions",
                left: rows,
                right: conds.len(),
            });
        }
        if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(CoreError::InvalidInput(format!("time {t} outside [0, 1]")));
        }
        Ok(StateBatch { xs, ts, conds })
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xs.shape()[1]
    }
}

/// Conditioned MLP with a learned condition embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedNet {
    mlp: Mlp,
    store: ParamStore,
    state_dim: usize,
    vocab: usize,
    embed_dim: usize,
}

impl ConditionedNet {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        vocab: usize,
        embed_dim: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab == 0 || embed_dim == 0 || state_dim == 0 {
            return Err(CoreError::InvalidInput(
                "state dimension, vocabulary and embedding width must be positive".into(),
            ));
        }
        let spec = LayerSpec::new(state_dim + TIME_FEATURES + embed_dim, hidden, output)?;
        let mlp = Mlp::new(spec, MLP_PREFIX);
        let mut store = ParamStore::new();
        mlp.init(&mut store, rng)?;
        let embed: Vec<f64> = (0..vocab * embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.insert(EMBED_PARAM, Tensor::new(vec![vocab, embed_dim], embed)?);
        Ok(ConditionedNet {
            mlp,
            store,
            state_dim,
            vocab,
            embed_dim,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let store = ckpt.to_store();
        let embed = store.get(EMBED_PARAM)?;
        let (vocab, embed_dim) = embed.dims2("embed table")?;
        let input = ckpt.layer_spec.input();
        if input <= TIME_FEATURES + embed_dim {
            return Err(CoreError::InvalidInput(format!(
                "layer spec input {input} too small for embedding width {embed_dim}"
            )));
        }
        let net = ConditionedNet {
            mlp: Mlp::new(ckpt.layer_spec.clone(), MLP_PREFIX),
            store,
            state_dim: input - TIME_FEATURES - embed_dim,
            vocab,
            embed_dim,
        };
        for layer in 0..net.mlp.spec.num_layers() {
            let w = net.store.get(&net.mlp.weight_name(layer))?;
            let want = [net.mlp.spec.widths[layer], net.mlp.spec.widths[layer + 1]];
            if w.shape() != want {
                return Err(CoreError::InvalidInput(format!(
                    "layer {layer} weight shape {:?} does not match spec {want:?}",
                    w.shape()
                )));
            }
            net.store.get(&net.mlp.bias_name(layer))?;
        }
        if net.store.len() != 2 * net.mlp.spec.num_layers() + 1 {
            return Err(CoreError::InvalidInput("checkpoint holds unexpected parameters".into()));
        }
        Ok(net)
    }

    pub fn to_checkpoint(&self, kind: &str) -> Checkpoint {
        Checkpoint::from_store(kind, self.mlp.spec.clone(), &self.store)
    }

    pub fn layer_spec(&self) -> &LayerSpec {
        &self.mlp.spec
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.spec.output()
    }

    pub fn check_batch(&self, batch: &StateBatch) -> Result<()> {
        if batch.dim() != self.state_dim {
            return Err(CoreError::InvalidInput(format!(
                "state dimension {} does not match network dimension {}",
                batch.dim(),
                self.state_dim
            )));
        }
        if let Some(c) = batch.conds.iter().find(|c| c.0 >= self.vocab) {
            return Err(CoreError::InvalidCondition {
                id: c.0,
                vocab: self.vocab,
            });
        }
        Ok(())
    }

    /// `[batch, output]` network output.
    pub fn forward<G: Graph>(&self, g: &mut G, batch: &StateBatch) -> Result<G::Value> {
        self.check_batch(batch)?;
        let rows = batch.len();
        let d = self.state_dim;
        let mut feats = Vec::with_capacity(rows * (d + TIME_FEATURES));
        for (r, &t) in batch.ts.iter().enumerate() {
            feats.extend_from_slice(batch.xs.row(r));
            feats.push(t);
            feats.push((2.0 * PI * t).sin());
            feats.push((2.0 * PI * t).cos());
        }
        let feats = g.constant(Tensor::new(vec![rows, d + TIME_FEATURES], feats)?)?;
        let table = g.param(&self.store, EMBED_PARAM)?;
        let ids: Vec<usize> = batch.conds.iter().map(|c| c.0).collect();
        let emb = g.gather_rows(&table, &ids)?;
        let input = g.concat_cols(&[feats, emb])?;
        Ok(self.mlp.forward(g, &self.store, &input)?)
    }
}
