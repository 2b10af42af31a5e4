//! Differentiable layers built on the tape.

pub mod activation;
pub mod conv;
pub mod layer;
pub mod norm;

pub use activation::{leaky_relu, sigmoid};
pub use conv::ConvSpec;
pub use layer::{ConvLayer, ParamBuilder, LEAKY_SLOPE};
pub use norm::{NormKind, NormLayer, RunningStats, BN_MOMENTUM, NORM_EPS};
