//! The two-stage HINet restorer and its half-instance-normalized blocks, on
//! a small CPU tensor library with reverse-mode differentiation.

pub mod autodiff;
pub mod blocks;
pub mod cli;
pub mod error;
pub mod gradsuite;
pub mod imageio;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use model::{Hinet, HinetConfig, StageOutputs};
pub use rng::RngState;
pub use tensor::{Dihedral, Real, Shape4, Tensor};
