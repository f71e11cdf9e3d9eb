//! Dense `f64` tensors with reverse-mode gradients for a fixed layer
//! vocabulary, plus RMSprop and global-norm gradient clipping.

pub mod check;
pub mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use optim::RmsProp;
pub use params::{clip_global_norm, Param, ParamStore};
pub use tape::{GruVars, Tape, Var};
pub use tensor::Tensor;
