//! 2-D convolution and transposed convolution (NCHW, square kernels,
//! zero padding), lowered to GEMM through im2col/col2im.
//!
//! Weights are `out×in×k×k` for [`Tape::conv2d`] and `in×out×k×k` for
//! [`Tape::conv_transpose2d`], so the two are adjoint when they share a
//! weight tensor. Biases are `1×out×1×1`.

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    ) -> Result<Self> {
        if !(1..=4).contains(&kernel) {
            return Err(Error::arg("ConvSpec", format!("kernel {kernel} not in 1..=4")));
        }
        if stride == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::arg("ConvSpec", "stride and channel counts must be >= 1"));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            has_bias,
        })
    }

    /// Shape-preserving 3×3 convolution with bias.
    pub fn conv3x3(cin: usize, cout: usize) -> Self {
        ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride: 1,
            padding: 1,
            has_bias: true,
        }
    }

    pub fn conv1x1(cin: usize, cout: usize) -> Self {
        ConvSpec {
            kernel: 1,
            padding: 0,
            ..Self::conv3x3(cin, cout)
        }
    }

    /// 4×4, stride 2, padding 1: exactly halves even extents.
    pub fn down4x4(cin: usize, cout: usize) -> Self {
        ConvSpec {
            kernel: 4,
            stride: 2,
            padding: 1,
            ..Self::conv3x3(cin, cout)
        }
    }

    /// 2×2, stride 2 (for transposed convolution): exactly doubles extents.
    pub fn up2x2(cin: usize, cout: usize) -> Self {
        ConvSpec {
            kernel: 2,
            stride: 2,
            padding: 0,
            ..Self::conv3x3(cin, cout)
        }
    }

    pub fn without_bias(self) -> Self {
        ConvSpec {
            has_bias: false,
            ..self
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// `floor((in + 2p − k) / s) + 1`.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::arg(
                "conv2d",
                format!("input extent {input} with padding {} smaller than kernel {}", self.padding, self.kernel),
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// `(in − 1)·s + k − 2p`.
    pub fn transpose_output_extent(&self, input: usize) -> Result<usize> {
        let full = (input - 1) * self.stride + self.kernel;
        if full <= 2 * self.padding {
            return Err(Error::arg(
                "conv_transpose2d",
                format!("padding {} leaves no output for input extent {input}", self.padding),
            ));
        }
        Ok(full - 2 * self.padding)
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4 {
            n: self.out_channels,
            c: self.in_channels,
            h: self.kernel,
            w: self.kernel,
        }
    }

    pub fn transpose_weight_shape(&self) -> Shape4 {
        Shape4 {
            n: self.in_channels,
            c: self.out_channels,
            h: self.kernel,
            w: self.kernel,
        }
    }

    pub fn bias_shape(&self) -> Shape4 {
        Shape4 {
            n: 1,
            c: self.out_channels,
            h: 1,
            w: 1,
        }
    }

    /// Multiply-accumulates of a forward convolution producing `out_h×out_w`.
    pub fn macs(&self, batch: usize, out_h: usize, out_w: usize) -> u64 {
        (batch * self.out_channels * out_h * out_w * self.fan_in()) as u64
    }

    /// Multiply-accumulates of a transposed convolution reading `in_h×in_w`.
    pub fn transpose_macs(&self, batch: usize, in_h: usize, in_w: usize) -> u64 {
        (batch * self.in_channels * in_h * in_w * self.out_channels * self.kernel * self.kernel) as u64
    }
}

/// Sliding-window geometry of an image of `c×h×w` against an output grid of
/// `oh×ow`.
#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }

    #[inline]
    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let i = (o * self.s + kk) as isize - self.p as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom, cols: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let Some(iy) = g.source(oy, ki, g.h) else {
                        line.fill(T::zero());
                        continue;
                    };
                    let src = &x[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        *v = match g.source(ox, kj, g.w) {
                            Some(ix) => src[ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back onto the image (adjoint of [`im2col`]).
fn col2im<T: Real>(cols: &[T], g: &Geom, x: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let Some(iy) = g.source(oy, ki, g.h) else {
                        continue;
                    };
                    let dst = &mut x[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                    for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        if let Some(ix) = g.source(ox, kj, g.w) {
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, all row-major and dense.
fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c[m×n] (+)= aᵀ · b` where `a` is stored `k×m`.
fn matmul_at<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c[m×n] (+)= a · bᵀ` where `b` is stored `n×k`.
fn matmul_bt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, 1, k as isize, beta, c, n as isize, 1);
}

fn check_conv_inputs<T: Real>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
    weight_shape: Shape4,
) -> Result<()> {
    if x.shape().c != spec.in_channels {
        return Err(Error::arg(
            op,
            format!("input has {} channels, spec expects {}", x.shape().c, spec.in_channels),
        ));
    }
    w.expect_shape(op, weight_shape)?;
    match (b, spec.has_bias) {
        (Some(b), true) => b.expect_shape(op, spec.bias_shape()),
        (None, false) => Ok(()),
        (Some(_), false) => Err(Error::arg(op, "bias given but spec has none")),
        (None, true) => Err(Error::arg(op, "spec requires a bias")),
    }
}

fn add_bias<T: Real>(out: &mut [T], b: &Tensor<T>, s: Shape4) {
    let plane = s.plane();
    for (chunk, n_c) in out.chunks_mut(plane).zip(0..) {
        let bias = b.data()[n_c % s.c];
        chunk.iter_mut().for_each(|v| *v = *v + bias);
    }
}

fn bias_grad<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let mut acc = vec![0.0f64; s.c];
    for (chunk, n_c) in dy.data().chunks(s.plane()).zip(0..) {
        acc[n_c % s.c] += chunk.iter().map(|v| v.f64()).sum::<f64>();
    }
    let shape = Shape4 { n: 1, c: s.c, h: 1, w: 1 };
    Tensor::from_vec(shape, acc.into_iter().map(T::of).collect()).expect("bias gradient shape")
}

pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    check_conv_inputs("conv2d", x, w, b, spec, spec.weight_shape())?;
    let s = x.shape();
    let (oh, ow) = (spec.output_extent(s.h)?, spec.output_extent(s.w)?);
    let g = Geom {
        c: s.c,
        h: s.h,
        w: s.w,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        oh,
        ow,
    };
    let out_shape = Shape4 {
        n: s.n,
        c: spec.out_channels,
        h: oh,
        w: ow,
    };
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.rows() * g.cols()] };
    let in_item = s.c * s.plane();
    let out_item = spec.out_channels * g.cols();
    for n in 0..s.n {
        let xn = &x.data()[n * in_item..(n + 1) * in_item];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut cols);
            &cols
        };
        matmul(
            spec.out_channels,
            g.rows(),
            g.cols(),
            w.data(),
            src,
            &mut out[n * out_item..(n + 1) * out_item],
            false,
        );
    }
    if let Some(b) = b {
        add_bias(&mut out, b, out_shape);
    }
    Tensor::from_vec(out_shape, out)
}

/// Returns `(dx, dw, db)`; `db` is meaningful only when the spec has a bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    let d = dy.shape();
    let g = Geom {
        c: s.c,
        h: s.h,
        w: s.w,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        oh: d.h,
        ow: d.w,
    };
    let mut dx = vec![T::zero(); s.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let in_item = s.c * s.plane();
    let out_item = d.c * d.plane();
    for n in 0..s.n {
        let xn = &x.data()[n * in_item..(n + 1) * in_item];
        let dyn_ = &dy.data()[n * out_item..(n + 1) * out_item];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut cols);
            &cols
        };
        matmul_bt(spec.out_channels, g.cols(), g.rows(), dyn_, src, &mut dw, n > 0);
        let dxn = &mut dx[n * in_item..(n + 1) * in_item];
        if g.is_pointwise() {
            matmul_at(g.rows(), spec.out_channels, g.cols(), w.data(), dyn_, dxn, false);
        } else {
            matmul_at(g.rows(), spec.out_channels, g.cols(), w.data(), dyn_, &mut cols, false);
            col2im(&cols, &g, dxn);
        }
    }
    Ok((
        Tensor::from_vec(s, dx)?,
        Tensor::from_vec(w.shape(), dw)?,
        bias_grad(dy),
    ))
}

pub fn conv_transpose2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    check_conv_inputs("conv_transpose2d", x, w, b, spec, spec.transpose_weight_shape())?;
    let s = x.shape();
    let (oh, ow) = (spec.transpose_output_extent(s.h)?, spec.transpose_output_extent(s.w)?);
    let out_shape = Shape4 {
        n: s.n,
        c: spec.out_channels,
        h: oh,
        w: ow,
    };
    // The output plays the role of the image; the input grid is the window grid.
    let g = Geom {
        c: spec.out_channels,
        h: oh,
        w: ow,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        oh: s.h,
        ow: s.w,
    };
    let mut out = vec![T::zero(); out_shape.numel()];
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let in_item = s.c * s.plane();
    let out_item = spec.out_channels * oh * ow;
    for n in 0..s.n {
        let xn = &x.data()[n * in_item..(n + 1) * in_item];
        matmul_at(g.rows(), spec.in_channels, g.cols(), w.data(), xn, &mut cols, false);
        col2im(&cols, &g, &mut out[n * out_item..(n + 1) * out_item]);
    }
    if let Some(b) = b {
        add_bias(&mut out, b, out_shape);
    }
    Tensor::from_vec(out_shape, out)
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    let d = dy.shape();
    let g = Geom {
        c: spec.out_channels,
        h: d.h,
        w: d.w,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        oh: s.h,
        ow: s.w,
    };
    let mut dx = vec![T::zero(); s.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let in_item = s.c * s.plane();
    let out_item = d.c * d.plane();
    for n in 0..s.n {
        im2col(&dy.data()[n * out_item..(n + 1) * out_item], &g, &mut cols);
        let xn = &x.data()[n * in_item..(n + 1) * in_item];
        matmul(spec.in_channels, g.rows(), g.cols(), w.data(), &cols, &mut dx[n * in_item..(n + 1) * in_item], false);
        matmul_bt(spec.in_channels, g.cols(), g.rows(), xn, &cols, &mut dw, n > 0);
    }
    Ok((
        Tensor::from_vec(s, dx)?,
        Tensor::from_vec(w.shape(), dw)?,
        bias_grad(dy),
    ))
}

impl<T: Real> Tape<T> {
    /// Cross-correlation with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let ys = y.shape();
        self.add_macs(spec.macs(ys.n, ys.h, ys.w));
        Ok(self.push(y, Op::Conv2d { x, w, b, spec: *spec }))
    }

    /// Transposed convolution; output extent `(in − 1)·s + k − 2p`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = conv_transpose2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let xs = self.shape(x);
        self.add_macs(spec.transpose_macs(xs.n, xs.h, xs.w));
        Ok(self.push(y, Op::ConvTranspose2d { x, w, b, spec: *spec }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_inputs, GradCheckOptions};
    use crate::rng::RngState;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    /// Direct six-loop cross-correlation, independent of im2col.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
        let s = x.shape();
        let (oh, ow) = (spec.output_extent(s.h).unwrap(), spec.output_extent(s.w).unwrap());
        Tensor::from_fn(shape(s.n, spec.out_channels, oh, ow), |n, o, y, xx| {
            let mut acc = 0.0;
            for c in 0..s.c {
                for ki in 0..spec.kernel {
                    for kj in 0..spec.kernel {
                        let iy = (y * spec.stride + ki) as isize - spec.padding as isize;
                        let ix = (xx * spec.stride + kj) as isize - spec.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                            acc += x.at(n, c, iy as usize, ix as usize) * w.at(o, c, ki, kj);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn pointwise_scaling() {
        let x = Tensor::<f32>::ones(shape(1, 1, 3, 3));
        let w = Tensor::full(shape(1, 1, 1, 1), 2.0);
        let y = conv2d_forward(&x, &w, None, &ConvSpec::conv1x1(1, 1).without_bias()).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn full_overlap_center() {
        let x = Tensor::<f32>::ones(shape(1, 1, 3, 3));
        let w = Tensor::ones(shape(1, 1, 3, 3));
        let y = conv2d_forward(&x, &w, None, &ConvSpec::conv3x3(1, 1).without_bias()).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn downsample_halves() {
        let spec = ConvSpec::down4x4(3, 6);
        assert_eq!(spec.output_extent(256).unwrap(), 128);
        assert_eq!(spec.output_extent(2).unwrap(), 1);
        let x = Tensor::<f32>::ones(shape(1, 3, 8, 8));
        let w = Tensor::ones(spec.weight_shape());
        let b = Tensor::zeros(spec.bias_shape());
        let y = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
        assert_eq!(y.shape().dims(), [1, 6, 4, 4]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Tensor::<f32>::ones(shape(1, 2, 3, 3));
        let spec = ConvSpec::conv3x3(3, 1).without_bias();
        let w = Tensor::ones(spec.weight_shape());
        assert!(conv2d_forward(&x, &w, None, &spec).is_err());
        let big = ConvSpec::new(2, 1, 4, 1, 0, false).unwrap();
        assert!(conv2d_forward(&x, &Tensor::ones(big.weight_shape()), None, &big).is_err());
        assert!(ConvSpec::new(1, 1, 5, 1, 0, false).is_err());
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = RngState::new(11);
        for spec in [
            ConvSpec::conv3x3(3, 4).without_bias(),
            ConvSpec::conv1x1(3, 5).without_bias(),
            ConvSpec::down4x4(3, 2).without_bias(),
            ConvSpec::new(3, 2, 2, 1, 0, false).unwrap(),
        ] {
            let x = Tensor::<f64>::randn(shape(2, 3, 6, 6), &mut rng, 0.0, 1.0).unwrap();
            let w = Tensor::<f64>::randn(spec.weight_shape(), &mut rng, 0.0, 1.0).unwrap();
            let fast = conv2d_forward(&x, &w, None, &spec).unwrap();
            let slow = naive_conv(&x, &w, &spec);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn transpose_single_pixel_deposit() {
        let x = Tensor::<f32>::full(shape(1, 1, 1, 1), 2.5);
        let spec = ConvSpec::up2x2(1, 1).without_bias();
        let w = Tensor::ones(spec.transpose_weight_shape());
        let y = conv_transpose2d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape().dims(), [1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));

        let x = Tensor::<f32>::ones(shape(2, 1, 5, 7));
        assert_eq!(conv_transpose2d_forward(&x, &w, None, &spec).unwrap().shape().dims(), [2, 1, 10, 14]);
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let mut rng = RngState::new(12);
        for (cin, cout, k, s, p, h) in [(3, 4, 3, 1, 1, 5), (2, 3, 4, 2, 1, 8), (3, 2, 2, 2, 0, 6), (2, 2, 1, 1, 0, 4)] {
            let spec = ConvSpec::new(cin, cout, k, s, p, false).unwrap();
            let x = Tensor::<f64>::randn(shape(2, cin, h, h), &mut rng, 0.0, 1.0).unwrap();
            let w = Tensor::<f64>::randn(spec.weight_shape(), &mut rng, 0.0, 1.0).unwrap();
            let cx = conv2d_forward(&x, &w, None, &spec).unwrap();
            let y = Tensor::<f64>::randn(cx.shape(), &mut rng, 0.0, 1.0).unwrap();
            let tspec = ConvSpec::new(cout, cin, k, s, p, false).unwrap();
            let ty = conv_transpose2d_forward(&y, &w, None, &tspec).unwrap();
            assert_eq!(ty.shape(), x.shape());
            let lhs = cx.dot_f64(&y).unwrap();
            let rhs = x.dot_f64(&ty).unwrap();
            assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = RngState::new(13);
        for spec in [ConvSpec::conv3x3(2, 3), ConvSpec::down4x4(2, 3), ConvSpec::conv1x1(2, 3)] {
            let inputs = vec![
                Tensor::<f64>::randn(shape(2, 2, 4, 4), &mut rng, 0.0, 1.0).unwrap(),
                Tensor::randn(spec.weight_shape(), &mut rng, 0.0, 0.5).unwrap(),
                Tensor::randn(spec.bias_shape(), &mut rng, 0.0, 0.5).unwrap(),
            ];
            let r = grad_check_inputs(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), &spec)?;
                    let y2 = t.square(y);
                    Ok(t.sum(y2))
                },
                &inputs,
                &GradCheckOptions::for_precision::<f64>(),
            )
            .unwrap();
            assert!(r.passed(), "{spec:?}: {r:?}");
        }
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = RngState::new(14);
        let spec = ConvSpec::up2x2(3, 2);
        let inputs = vec![
            Tensor::<f64>::randn(shape(2, 3, 3, 3), &mut rng, 0.0, 1.0).unwrap(),
            Tensor::randn(spec.transpose_weight_shape(), &mut rng, 0.0, 0.5).unwrap(),
            Tensor::randn(spec.bias_shape(), &mut rng, 0.0, 0.5).unwrap(),
        ];
        let r = grad_check_inputs(
            |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), &spec)?;
                let y2 = t.square(y);
                Ok(t.sum(y2))
            },
            &inputs,
            &GradCheckOptions::for_precision::<f64>(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn tape_counts_macs() {
        let mut tape = Tape::<f32>::new();
        let spec = ConvSpec::conv3x3(3, 64).without_bias();
        let x = tape.leaf(Tensor::zeros(shape(1, 3, 256, 256)));
        let w = tape.leaf(Tensor::zeros(spec.weight_shape()));
        tape.conv2d(x, w, None, &spec).unwrap();
        assert_eq!(tape.macs(), 113_246_208);
    }
}
