//! Parameter registration helpers and the convolution layer wrapper.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::rng::RngState;
use crate::tensor::{Real, Shape4, Tensor};

use super::conv::ConvSpec;

/// Negative slope used by every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Registers parameters under a dotted name prefix and initializes them.
///
/// Conv weights are Gaussian with `std = sqrt(2 / (fan_in * (1 + 0.2²)))`,
/// biases and shifts start at zero, scales at one.
pub struct ParamBuilder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut RngState,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut RngState) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        ParamBuilder {
            prefix: self.qualify(name),
            store: self.store,
            rng: self.rng,
        }
    }

    pub fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let full = self.qualify(name);
        self.store.insert(full, value, trainable)
    }

    fn kaiming(&mut self, shape: Shape4, fan_in: usize) -> Result<Tensor<T>> {
        let gain = 1.0 + LEAKY_SLOPE * LEAKY_SLOPE;
        let std = (2.0 / (fan_in.max(1) as f64 * gain)).sqrt();
        Tensor::randn(shape, self.rng, 0.0, std)
    }

    pub fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<ConvLayer> {
        let mut scope = self.scope(name);
        let w = scope.kaiming(spec.weight_shape(), spec.fan_in())?;
        let weight = scope.tensor("weight", w, true)?;
        let bias = if spec.has_bias {
            Some(scope.tensor("bias", Tensor::zeros(spec.bias_shape()), true)?)
        } else {
            None
        };
        Ok(ConvLayer {
            spec,
            weight,
            bias,
            transpose: false,
        })
    }

    pub fn conv_transpose(&mut self, name: &str, spec: ConvSpec) -> Result<ConvLayer> {
        let mut scope = self.scope(name);
        // each output pixel sees in_channels * k² / s² taps
        let taps = spec.in_channels * spec.kernel * spec.kernel / (spec.stride * spec.stride);
        let w = scope.kaiming(spec.transpose_weight_shape(), taps)?;
        let weight = scope.tensor("weight", w, true)?;
        let bias = if spec.has_bias {
            Some(scope.tensor("bias", Tensor::zeros(spec.bias_shape()), true)?)
        } else {
            None
        };
        Ok(ConvLayer {
            spec,
            weight,
            bias,
            transpose: true,
        })
    }

    /// Per-channel scale (ones) and shift (zeros).
    pub fn affine(&mut self, name: &str, channels: usize) -> Result<(ParamId, ParamId)> {
        let s = Shape4 { n: 1, c: channels, h: 1, w: 1 };
        let mut scope = self.scope(name);
        let gamma = scope.tensor("gamma", Tensor::ones(s), true)?;
        let beta = scope.tensor("beta", Tensor::zeros(s), true)?;
        Ok((gamma, beta))
    }
}

/// A convolution (or transposed convolution) with its parameter handles.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub transpose: bool,
}

impl ConvLayer {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        if self.transpose {
            tape.conv_transpose2d(x, w, b, &self.spec)
        } else {
            tape.conv2d(x, w, b, &self.spec)
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        std::iter::once(self.weight).chain(self.bias)
    }
}
