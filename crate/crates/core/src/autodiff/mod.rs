//! Reverse-mode automatic differentiation over dense row-major matrices.

pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{mlp_from_str, mlp_to_string};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use mlp::{mlp_forward, Activation, BoundMlp, MlpGrads, MlpParams};
pub use optim::{sgd_update, Sgd};
pub use tape::{Gradients, PrimitiveKind, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;
