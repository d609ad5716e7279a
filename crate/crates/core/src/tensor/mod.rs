//! Dense-network kernel: sequential stacks with exact reverse-mode gradients,
//! losses, Adam, a finite-difference checker and the checkpoint container.

mod adam;
mod bundle;
pub mod gradcheck;
mod loss;
mod param;
mod rng;
mod stack;

pub use adam::{AdamMeta, AdamState};
pub use bundle::{TensorBundle, TensorEntry};
pub use gradcheck::{grad_check, GradCheckReport, LossHead, Objective, StackObjective};
pub use loss::{categorical_cross_entropy, mse_loss, one_hot};
pub use param::{Matrix, ParamTensor};
pub use rng::{RngSnapshot, RngState};
pub use stack::{softmax_rows, Backward, LayerKind, LayerSpec, Mode, Stack, Tape, BN_EPS, BN_MOMENTUM};
