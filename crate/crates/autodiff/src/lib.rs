//! Minimal reverse-mode automatic differentiation for the policy networks and
//! structural trainers: a define-by-run tape over dense `f64` matrices, a
//! handful of layers, the Beta density, and Adam.

mod error;
mod ops;
mod tape;

pub mod dist;
pub mod init;
pub mod layers;
pub mod optim;
pub mod params;
pub mod special;

pub use error::{DiffError, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{BackwardFn, Gradients, Tape, Tensor, Var};
