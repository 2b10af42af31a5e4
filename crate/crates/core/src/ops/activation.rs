use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `x` where `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { v * slope })
}

/// Logistic function, kept strictly inside `(0, 1)` for finite inputs.
pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let one = T::one();
    let hi = one - T::epsilon() / T::of(2.0);
    let lo = T::min_positive_value();
    x.map(|v| {
        let y = if v >= T::zero() {
            one / (one + (-v).exp())
        } else {
            let e = v.exp();
            e / (one + e)
        };
        y.max(lo).min(hi)
    })
}

impl<T: Real> Tape<T> {
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = leaky_relu(self.value(x), slope);
        self.push(y, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_channels(start..start + len)?;
        Ok(self.push(y, Op::SliceChannels { x, start }))
    }

    /// First and second half of the channels, in order.
    pub fn channel_split(&mut self, x: Var) -> Result<(Var, Var)> {
        let c = self.shape(x).c;
        if !c.is_multiple_of(2) {
            return Err(Error::arg("channel_split", format!("odd channel count {c}")));
        }
        Ok((self.slice_channels(x, 0, c / 2)?, self.slice_channels(x, c / 2, c / 2)?))
    }

    /// Concatenates along channels; batch and spatial extents must agree.
    pub fn channel_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::arg("channel_concat", format!("cannot concatenate {sa} with {sb}")));
        }
        let out_shape = sa.with_c(sa.c + sb.c);
        let (ia, ib) = (sa.c * sa.plane(), sb.c * sb.plane());
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..sa.n {
            data.extend_from_slice(&self.value(a).data()[n * ia..(n + 1) * ia]);
            data.extend_from_slice(&self.value(b).data()[n * ib..(n + 1) * ib]);
        }
        let y = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(y, Op::ConcatChannels(a, b)))
    }
}
