//! Dense tensors, reverse-mode differentiation, SGD and seeded sampling.

mod gradcheck;
mod optim;
mod param;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use optim::sgd_step;
pub use param::{GradBuf, Gradients, ParamId, ParamStore, Parameter};
pub use rng::{sample_negatives, Rng, RngState};
pub use tape::{AttentionSpec, Tape, Var};
pub use tensor::{dot, Tensor};
