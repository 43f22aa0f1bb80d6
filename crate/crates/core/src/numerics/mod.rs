//! Dense linear algebra, the differentiation tape, optimizers and gradient checking.

pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use optim::{adam_step, sgd_step, AdamConfig, OptimizerKind, OptimizerState};
pub use tape::{Gradients, NodeId, OpKind, Tape};
