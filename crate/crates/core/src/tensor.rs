//! Dense NCHW tensors.
//!
//! A [`Tensor`] is an immutable 4-D value with a shared, reference-counted
//! buffer, so cloning is cheap and tensors can be handed between threads.
//! In-place mutation goes through [`Tensor::data_mut`], which copies on write
//! when the buffer is shared.
//!
//! Reductions accumulate in `f64` with a fixed traversal order regardless of
//! the element type, so statistics are reproducible bit-for-bit.

use std::fmt;
use std::ops::{BitOr, Range};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Element type of a tensor. Implemented for `f32` (the compute precision)
/// and `f64` (used by the gradient-check harness).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    const BITS: u32;

    /// `c = alpha * a·b + beta * c` for row/column-strided matrices, where
    /// `a` is `m×k`, `b` is `k×n` and `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

/// Neumaier (improved Kahan) summation.
pub fn neumaier(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

fn check_gemm_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $bits:expr, $gemm:path) => {
        impl Real for $t {
            const BITS: u32 = $bits;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_gemm_extent(a.len(), m, k, rsa, csa);
                check_gemm_extent(b.len(), k, n, rsb, csb);
                check_gemm_extent(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand was bounds-checked against its strides above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, 32, matrixmultiply::sgemm);
impl_real!(f64, 64, matrixmultiply::dgemm);

/// Extents of a 4-D tensor in batch, channel, height, width order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape4 { n, c, h, w };
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!("{shape}: every extent must be at least 1")));
        }
        n.checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::InvalidShape(format!("{shape}: element count overflows")))?;
        Ok(shape)
    }

    pub const fn scalar() -> Self {
        Shape4 { n: 1, c: 1, h: 1, w: 1 }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape4 { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape4 { h, w, ..self }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl std::str::FromStr for Shape4 {
    type Err = Error;

    /// Parses `NxCxHxW`, e.g. `1x3x256x256`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(['x', 'X', '×']).collect();
        if parts.len() != 4 {
            return Err(Error::InvalidShape(format!("`{s}`: expected NxCxHxW")));
        }
        let mut dims = [0usize; 4];
        for (d, p) in dims.iter_mut().zip(&parts) {
            *d = p
                .trim()
                .parse()
                .map_err(|_| Error::InvalidShape(format!("`{s}`: `{p}` is not a count")))?;
        }
        Shape4::new(dims[0], dims[1], dims[2], dims[3])
    }
}

/// Set of axes for a reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Axes {
    pub n: bool,
    pub c: bool,
    pub h: bool,
    pub w: bool,
}

impl Axes {
    pub const N: Axes = Axes { n: true, c: false, h: false, w: false };
    pub const C: Axes = Axes { n: false, c: true, h: false, w: false };
    pub const H: Axes = Axes { n: false, c: false, h: true, w: false };
    pub const W: Axes = Axes { n: false, c: false, h: false, w: true };
    pub const HW: Axes = Axes { n: false, c: false, h: true, w: true };
    pub const ALL: Axes = Axes { n: true, c: true, h: true, w: true };

    fn reduced(&self, shape: Shape4) -> Shape4 {
        Shape4 {
            n: if self.n { 1 } else { shape.n },
            c: if self.c { 1 } else { shape.c },
            h: if self.h { 1 } else { shape.h },
            w: if self.w { 1 } else { shape.w },
        }
    }
}

impl BitOr for Axes {
    type Output = Axes;

    fn bitor(self, rhs: Axes) -> Axes {
        Axes {
            n: self.n | rhs.n,
            c: self.c | rhs.c,
            h: self.h | rhs.h,
            w: self.w | rhs.w,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Population variance (divides by the count).
    Var,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape4,
    data: Arc<Vec<T>>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<f{}>[{}](", T::BITS, self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, ")")
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "{shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
        }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape4) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape4::scalar(), value)
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    /// I.i.d. Gaussian samples. `std == 0` yields a constant tensor.
    pub fn randn(shape: Shape4, rng: &mut RngState, mean: f64, std: f64) -> Result<Self> {
        if !(std >= 0.0) {
            return Err(Error::arg("randn", format!("std must be >= 0, got {std}")));
        }
        let data = (0..shape.numel())
            .map(|_| T::of(mean + std * rng.normal()))
            .collect();
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// I.i.d. samples from `[lo, hi)`.
    pub fn uniform(shape: Shape4, rng: &mut RngState, lo: f64, hi: f64) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::of(lo + (hi - lo) * rng.uniform()))
            .collect();
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Exclusive access to the buffer; copies it first if shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// Value of a 1×1×1×1 tensor.
    pub fn item(&self) -> Result<T> {
        if self.shape != Shape4::scalar() {
            return Err(Error::NotScalar(self.shape));
        }
        Ok(self.data[0])
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| U::of(v.f64())).collect()),
        }
    }

    pub fn reshape(&self, shape: Shape4) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// View as `1×1×1×numel`.
    pub fn flatten(&self) -> Self {
        Tensor {
            shape: Shape4 { n: 1, c: 1, h: 1, w: self.numel() },
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(op, other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn binary(&self, other: &Self, kind: BinaryKind) -> Result<Self> {
        match kind {
            BinaryKind::Add => self.zip_map(other, "add", |a, b| a + b),
            BinaryKind::Sub => self.zip_map(other, "sub", |a, b| a - b),
            BinaryKind::Mul => self.zip_map(other, "mul", |a, b| a * b),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += other` in place.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape("add_assign", other.shape)?;
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn reduce(&self, axes: Axes, kind: ReduceKind) -> Result<Self> {
        if self.numel() == 0 {
            return Err(Error::arg("reduce", "empty tensor"));
        }
        let out_shape = axes.reduced(self.shape);
        let count = (self.numel() / out_shape.numel()) as f64;
        let sums = self.reduce_f64(axes, out_shape, |v| v);
        let out: Vec<f64> = match kind {
            ReduceKind::Sum => sums,
            ReduceKind::Mean => sums.iter().map(|s| s / count).collect(),
            ReduceKind::Var => {
                let means: Vec<f64> = sums.iter().map(|s| s / count).collect();
                let s = self.shape;
                let mut acc = vec![0.0f64; out_shape.numel()];
                for (i, &v) in self.data.iter().enumerate() {
                    let o = reduced_index(s, out_shape, axes, i);
                    let d = v.f64() - means[o];
                    acc[o] += d * d;
                }
                acc.iter().map(|a| a / count).collect()
            }
        };
        Ok(Tensor {
            shape: out_shape,
            data: Arc::new(out.into_iter().map(T::of).collect()),
        })
    }

    fn reduce_f64(&self, axes: Axes, out_shape: Shape4, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut acc = vec![0.0f64; out_shape.numel()];
        for (i, &v) in self.data.iter().enumerate() {
            acc[reduced_index(self.shape, out_shape, axes, i)] += f(v.f64());
        }
        acc
    }

    /// Compensated sum.
    pub fn sum_f64(&self) -> f64 {
        neumaier(self.data.iter().map(|v| v.f64()))
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.numel() as f64
    }

    pub fn dot_f64(&self, other: &Self) -> Result<f64> {
        self.expect_shape("dot", other.shape)?;
        Ok(neumaier(self.data.iter().zip(other.data.iter()).map(|(a, b)| a.f64() * b.f64())))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_shape("max_abs_diff", other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Channels `range` of every batch item.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self> {
        let s = self.shape;
        if range.start >= range.end || range.end > s.c {
            return Err(Error::arg(
                "slice_channels",
                format!("range {range:?} out of bounds for {s}"),
            ));
        }
        let out_shape = s.with_c(range.end - range.start);
        let plane = s.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n {
            let start = s.index(n, range.start, 0, 0);
            data.extend_from_slice(&self.data[start..start + out_shape.c * plane]);
        }
        Tensor::from_vec(out_shape, data)
    }

    /// Batch items `range`.
    pub fn slice_batch(&self, range: Range<usize>) -> Result<Self> {
        let s = self.shape;
        if range.start >= range.end || range.end > s.n {
            return Err(Error::arg(
                "slice_batch",
                format!("range {range:?} out of bounds for {s}"),
            ));
        }
        let item = s.c * s.plane();
        Tensor::from_vec(
            Shape4 { n: range.end - range.start, ..s },
            self.data[range.start * item..range.end * item].to_vec(),
        )
    }

    /// Stacks along the batch axis.
    pub fn concat_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::arg("concat_batch", "no tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.shape.c, first.shape.h, first.shape.w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_batch",
                    expected: first.shape.with_c(first.shape.c),
                    got: s,
                });
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape4 { n, ..first.shape }, data)
    }

    /// Reflect-pads (mirror without repeating the edge) on the bottom and right.
    /// Pads longer than the extent keep mirroring back and forth; a single
    /// row or column is repeated.
    pub fn reflect_pad(&self, pad_h: usize, pad_w: usize) -> Result<Self> {
        let s = self.shape;
        if pad_h == 0 && pad_w == 0 {
            return Ok(self.clone());
        }
        let reflect = |i: usize, len: usize| {
            if len == 1 {
                return 0;
            }
            let period = 2 * (len - 1);
            let r = i % period;
            if r < len {
                r
            } else {
                period - r
            }
        };
        let out = Shape4::new(s.n, s.c, s.h + pad_h, s.w + pad_w)?;
        Ok(Tensor::from_fn(out, |n, c, h, w| self.at(n, c, reflect(h, s.h), reflect(w, s.w))))
    }

    /// Top-left `h×w` window.
    pub fn crop(&self, h: usize, w: usize) -> Result<Self> {
        self.crop_at(0, 0, h, w)
    }

    pub fn crop_at(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if h == 0 || w == 0 || top + h > s.h || left + w > s.w {
            return Err(Error::arg(
                "crop",
                format!("window {h}x{w} at ({top},{left}) exceeds {s}"),
            ));
        }
        Ok(Tensor::from_fn(s.with_hw(h, w), |n, c, y, x| {
            self.at(n, c, top + y, left + x)
        }))
    }

    pub(crate) fn expect_shape(&self, op: &'static str, expected: Shape4) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                op,
                expected,
                got: self.shape,
            });
        }
        Ok(())
    }
}

#[inline]
fn reduced_index(s: Shape4, o: Shape4, axes: Axes, flat: usize) -> usize {
    let w = flat % s.w;
    let h = (flat / s.w) % s.h;
    let c = (flat / s.plane()) % s.c;
    let n = flat / (s.plane() * s.c);
    o.index(
        if axes.n { 0 } else { n },
        if axes.c { 0 } else { c },
        if axes.h { 0 } else { h },
        if axes.w { 0 } else { w },
    )
}

/// The eight flip/90°-rotation symmetries of a square pixel grid.
///
/// Element `k` transposes the spatial axes when bit 2 is set, then flips
/// rows (bit 1) and columns (bit 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn new(transpose: bool, flip_rows: bool, flip_cols: bool) -> Self {
        Dihedral((transpose as u8) << 2 | (flip_rows as u8) << 1 | flip_cols as u8)
    }

    pub fn index(&self) -> u8 {
        self.0
    }

    pub fn transposes(&self) -> bool {
        self.0 & 4 != 0
    }

    pub fn hflip() -> Self {
        Dihedral::new(false, false, true)
    }

    pub fn vflip() -> Self {
        Dihedral::new(false, true, false)
    }

    /// Counter-clockwise quarter turn.
    pub fn rot90() -> Self {
        Dihedral::new(true, true, false)
    }

    /// Maps an output coordinate back to the source coordinate.
    #[inline]
    fn source(&self, y: usize, x: usize, out_h: usize, out_w: usize) -> (usize, usize) {
        let y = if self.0 & 2 != 0 { out_h - 1 - y } else { y };
        let x = if self.0 & 1 != 0 { out_w - 1 - x } else { x };
        if self.transposes() {
            (x, y)
        } else {
            (y, x)
        }
    }

    pub fn apply<T: Real>(&self, t: &Tensor<T>) -> Tensor<T> {
        let s = t.shape();
        let out = if self.transposes() { s.with_hw(s.w, s.h) } else { s };
        Tensor::from_fn(out, |n, c, y, x| {
            let (sy, sx) = self.source(y, x, out.h, out.w);
            t.at(n, c, sy, sx)
        })
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: Dihedral) -> Dihedral {
        let probe = Self::probe();
        let target = self.apply(&first.apply(&probe));
        Dihedral::all()
            .find(|d| d.apply(&probe) == target)
            .expect("dihedral group is closed")
    }

    pub fn inverse(&self) -> Dihedral {
        Dihedral::all()
            .find(|d| d.compose(*self) == Dihedral::IDENTITY)
            .expect("every dihedral element is invertible")
    }

    fn probe() -> Tensor<f32> {
        let s = Shape4 { n: 1, c: 1, h: 3, w: 3 };
        Tensor::from_fn(s, |_, _, h, w| (h * 3 + w) as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(Shape4::new(shape.0, shape.1, shape.2, shape.3).unwrap(), v.to_vec())
            .unwrap()
    }

    #[test]
    fn shape_rejects_zero_and_overflow() {
        assert!(Shape4::new(0, 1, 1, 1).is_err());
        assert!(Shape4::new(1, 1, 1, 0).is_err());
        assert!(Shape4::new(usize::MAX, 2, 1, 1).is_err());
        assert_eq!(Shape4::new(2, 3, 4, 5).unwrap().numel(), 120);
        assert_eq!("1x3x256x256".parse::<Shape4>().unwrap().dims(), [1, 3, 256, 256]);
        assert!("1x3x256".parse::<Shape4>().is_err());
    }

    #[test]
    fn elementwise_examples() {
        let a = t((1, 1, 1, 2), &[1.0, 2.0]);
        let b = t((1, 1, 1, 2), &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);

        let mut rng = RngState::new(3);
        let x = Tensor::<f32>::randn(Shape4::new(2, 3, 4, 5).unwrap(), &mut rng, 0.0, 1.0).unwrap();
        assert!(x.sub(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(x.mul(&Tensor::ones(x.shape())).unwrap(), x);
    }

    #[test]
    fn elementwise_rejects_mismatch() {
        let a = t((1, 1, 1, 2), &[1.0, 2.0]);
        let b = t((1, 1, 2, 1), &[1.0, 2.0]);
        let err = a.add(&b).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"), "{err}");
    }

    #[test]
    fn reduce_examples() {
        let c7 = Tensor::<f32>::full(Shape4::new(1, 2, 3, 3).unwrap(), 7.0);
        let m = c7.reduce(Axes::HW, ReduceKind::Mean).unwrap();
        assert_eq!(m.shape().dims(), [1, 2, 1, 1]);
        assert!(m.data().iter().all(|&v| v == 7.0));
        let v = c7.reduce(Axes::HW, ReduceKind::Var).unwrap();
        assert!(v.data().iter().all(|&v| v == 0.0));

        let two = t((1, 1, 1, 2), &[1.0, 3.0]);
        assert_eq!(two.reduce(Axes::HW, ReduceKind::Var).unwrap().item().unwrap(), 1.0);
        assert_eq!(two.reduce(Axes::ALL, ReduceKind::Sum).unwrap().item().unwrap(), 4.0);
    }

    #[test]
    fn reduce_over_batch_and_channel() {
        let x = Tensor::<f64>::from_fn(Shape4::new(2, 3, 1, 2).unwrap(), |n, c, _, w| {
            (n * 100 + c * 10 + w) as f64
        });
        let per_c = x.reduce(Axes::N | Axes::HW, ReduceKind::Mean).unwrap();
        assert_eq!(per_c.shape().dims(), [1, 3, 1, 1]);
        assert_eq!(per_c.data(), &[50.5, 60.5, 70.5]);
    }

    #[test]
    fn randn_degenerate_and_deterministic() {
        let s = Shape4::new(1, 2, 3, 4).unwrap();
        let c = Tensor::<f32>::randn(s, &mut RngState::new(1), 0.25, 0.0).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.25));
        let a = Tensor::<f32>::randn(s, &mut RngState::new(9), 0.0, 1.0).unwrap();
        let b = Tensor::<f32>::randn(s, &mut RngState::new(9), 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(Tensor::<f32>::randn(s, &mut RngState::new(9), 0.0, -1.0).is_err());
    }

    #[test]
    fn randn_moments() {
        // Standard error of the mean is 1e-3 at 10^6 samples; of the std ~7e-4.
        let s = Shape4::new(1, 1, 1000, 1000).unwrap();
        let x = Tensor::<f64>::randn(s, &mut RngState::new(2024), 0.0, 1.0).unwrap();
        let mean = x.mean_f64();
        let std = x.reduce(Axes::ALL, ReduceKind::Var).unwrap().item().unwrap().sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((std - 1.0).abs() < 0.01, "std {std}");
    }

    #[test]
    fn channel_slice_and_batch_ops() {
        let x = t((1, 4, 1, 1), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.slice_channels(2..4).unwrap().data(), &[3.0, 4.0]);
        assert!(x.slice_channels(3..5).is_err());
        let b = Tensor::concat_batch(&[x.clone(), x.clone()]).unwrap();
        assert_eq!(b.shape().n, 2);
        assert_eq!(b.slice_batch(1..2).unwrap(), x);
    }

    #[test]
    fn reflect_pad_then_crop() {
        let x = Tensor::<f32>::from_fn(Shape4::new(1, 1, 3, 3).unwrap(), |_, _, h, w| (h * 3 + w) as f32);
        let p = x.reflect_pad(2, 1).unwrap();
        assert_eq!(p.shape().dims(), [1, 1, 5, 4]);
        // rows 3 and 4 mirror rows 1 and 0
        assert_eq!(p.at(0, 0, 3, 0), x.at(0, 0, 1, 0));
        assert_eq!(p.at(0, 0, 4, 2), x.at(0, 0, 0, 2));
        assert_eq!(p.at(0, 0, 0, 3), x.at(0, 0, 0, 1));
        assert_eq!(p.crop(3, 3).unwrap(), x);

        let row = Tensor::<f32>::from_vec(Shape4::new(1, 1, 1, 3).unwrap(), vec![0.0, 1.0, 2.0]).unwrap();
        let long = row.reflect_pad(3, 5).unwrap();
        assert_eq!(long.shape().dims(), [1, 1, 4, 8]);
        assert_eq!(&long.data()[..8], &[0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0]);
        assert_eq!(&long.data()[24..], &long.data()[..8]);
    }

    #[test]
    fn dihedral_group_laws() {
        let x = Tensor::<f32>::from_fn(Shape4::new(1, 2, 4, 4).unwrap(), |_, c, h, w| {
            (c * 16 + h * 4 + w) as f32
        });
        let h = Dihedral::hflip();
        assert_eq!(h.apply(&h.apply(&x)), x);
        let r = Dihedral::rot90();
        let mut y = x.clone();
        for _ in 0..4 {
            y = r.apply(&y);
        }
        assert_eq!(y, x);
        assert_ne!(r.apply(&x), x);
        for d in Dihedral::all() {
            assert_eq!(d.inverse().apply(&d.apply(&x)), x);
        }
        let distinct: std::collections::HashSet<Vec<u32>> = Dihedral::all()
            .map(|d| d.apply(&x).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), 8);
    }

    #[test]
    fn rot90_is_counter_clockwise() {
        // [[0,1],[2,3]] turned a quarter counter-clockwise is [[1,3],[0,2]]
        let x = t((1, 1, 2, 2), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(Dihedral::rot90().apply(&x).data(), &[1.0, 3.0, 0.0, 2.0]);
    }

    proptest::proptest! {
        #[test]
        fn flatten_round_trip(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
            let s = Shape4::new(n, c, h, w).unwrap();
            let x = Tensor::<f32>::randn(s, &mut RngState::new(seed), 0.0, 1.0).unwrap();
            let back = x.flatten().reshape(s).unwrap();
            proptest::prop_assert_eq!(back, x);
        }
    }
}
