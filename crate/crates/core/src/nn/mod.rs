//! Dense tensors, reverse-mode gradients, losses and Adam.

mod checkpoint;
mod gradcheck;
mod linear;
pub mod ops;
mod optim;
mod param;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC};
pub use gradcheck::{grad_check, grad_check_store, relative_error};
pub use linear::Linear;
pub use optim::{adam_step, OptimConfig};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{dot, Tensor};
