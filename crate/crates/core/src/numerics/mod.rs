//! Reverse-mode differentiation, parameter storage and the Adam optimizer.

mod adam;
mod backend;
mod gradcheck;
mod params;
mod tape;

pub use adam::{adam_step, Adam};
pub use backend::{masked_softmax, sigmoid, softplus, Backend, Binary, Bind, Eval, Unary};
pub use gradcheck::{grad_check, project, GradCheck};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{forward_backward, Adjoints, GradBuf, Gradients, Tape, Var};
