//! Numerical substrate: tensors, the autodiff tape, parameter storage,
//! the optimizer, checkpoints, and gradient verification.

pub mod adam;
pub mod checkpoint;
pub mod findiff;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use findiff::{finite_diff_check, FiniteDiffReport};
pub use params::{Bound, ParamSet};
pub use tape::{softplus, Tape, VarId};
pub use tensor::Tensor;
