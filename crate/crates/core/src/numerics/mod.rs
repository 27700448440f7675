//! Dense math, the conditional MLP, low-rank adapters and gradients.

mod gradcheck;
mod matrix;
mod mlp;
mod optim;
mod params;

pub use gradcheck::{finite_diff_check, FdReport, TensorError};
pub use matrix::DenseMatrix;
pub use mlp::{
    backward, forward, forward_tape, silu, silu_grad, Activation, GradTargets, Gradients, Layer,
    LoraAdapter, LoraLayer, MlpParams, Tape,
};
pub use optim::{AdamW, CosineSchedule, Momentum, Optimizer};
pub use params::{flatten, l2_norm, Params};

/// Gradient of a scalar loss together with the loss value.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub loss: f64,
    pub grads: Gradients,
}
