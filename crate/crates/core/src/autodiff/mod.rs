//! Minimal tensor autodiff: the tape, its kernels, and SGD.

pub(crate) mod kernels;
mod optim;
mod tape;

pub use optim::{sgd_step, SgdConfig, Velocity};
pub use tape::{Tape, Var};
pub(crate) use tape::softmax_into;
