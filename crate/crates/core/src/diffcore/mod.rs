//! Minimal differentiable compute core: dense matrices, a reverse-mode tape,
//! shared MLPs with optional normalization, optimizers, checkpoints and a
//! finite-difference gradient auditor.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod matrix;
pub mod nn;
pub mod optim;
mod params;

pub use checkpoint::Checkpoint;
pub use graph::{
    bce, clamp_prob, sigmoid, smooth_l1, softmax, softmax_in_place, Axis, Gradients, Graph, Var,
    BCE_CLAMP,
};
pub use matrix::Matrix;
pub use nn::{layer_norm, Activation, Linear, Mlp, MlpSpec, Norm, NormKind, NORM_EPS};
pub use optim::{sgd_step, Optimizer, OptimizerConfig};
pub use params::{Param, ParamId, ParamStore};
