//! Minimal reverse-mode automatic differentiation over dense f64 tensors,
//! with tanh MLPs, AdamW and a binary checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{GradError, Result};
pub use mlp::{LayerSpec, Mlp};
pub use optim::{optimizer_step, OptimizerConfig};
pub use params::{clip_grad_norm, Gradients, Param, ParamStore};
pub use tape::{Eval, Graph, Tape, Var};
pub use tensor::Tensor;
