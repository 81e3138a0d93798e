//! Reverse-mode differentiable computation core with a finite-difference
//! oracle and an Adam optimizer. Just enough tensor machinery to train the
//! denoiser and residual embeddings; everything is f64 and deterministic.

pub mod fd;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use fd::finite_diff_grad;
pub use optim::{adam_step, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{softmax_rows, GradientMap, ParamSet, Tape, VarId};
pub use tensor::Tensor;
