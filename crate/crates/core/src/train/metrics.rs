use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Default PSNR ceiling in dB; with peak 1 it corresponds to an mse floor of 1e-10.
pub const PSNR_CAP: f64 = 100.0;

fn mse_floor(peak: f64, cap: f64) -> f64 {
    peak * peak * 10f64.powf(-cap / 10.0)
}

/// `10·log10(peak² / mse)` over all elements, saturating at `cap`.
pub fn psnr<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, peak: f64, cap: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::arg("psnr", format!("peak must be positive, got {peak}")));
    }
    let d = pred.sub(target)?;
    let mse = d.dot_f64(&d)? / d.numel() as f64;
    Ok(10.0 * (peak * peak / mse.max(mse_floor(peak, cap))).log10())
}

/// Per-image PSNR averaged over the batch.
pub fn mean_psnr<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let n = pred.shape().n;
    let mut total = 0.0;
    for i in 0..n {
        total += psnr(&pred.slice_batch(i..i + 1)?, &target.slice_batch(i..i + 1)?, 1.0, PSNR_CAP)?;
    }
    Ok(total / n as f64)
}

impl<T: Real> Tape<T> {
    /// Differentiable PSNR (peak 1, 100 dB ceiling) of `pred` against `target`.
    pub fn psnr(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d);
        let mse = self.mean(sq);
        let mse = self.clamp_min(mse, T::of(mse_floor(1.0, PSNR_CAP)));
        let l = self.ln(mse);
        Ok(self.scale(l, T::of(-10.0 / std::f64::consts::LN_10)))
    }
}

/// `−Σ psnr(image, y)` over the stage outputs.
pub fn psnr_loss<T: Real>(tape: &mut Tape<T>, images: &[Var], y: Var) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &img in images {
        let p = tape.psnr(img, y)?;
        total = Some(match total {
            Some(t) => tape.add(t, p)?,
            None => p,
        });
    }
    let total = total.ok_or_else(|| Error::arg("psnr_loss", "no stage outputs"))?;
    Ok(tape.scale(total, T::of(-1.0)))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut g = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of one plane.
fn blur(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WIN]) -> (Vec<f64>, usize, usize) {
    let ow = w - SSIM_WIN + 1;
    let oh = h - SSIM_WIN + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WIN).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity (11×11 Gaussian window, σ = 1.5, data range 1),
/// per channel, averaged over channels and images.
pub fn ssim<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let s = pred.shape();
    if s != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            expected: s,
            got: target.shape(),
        });
    }
    if s.h < SSIM_WIN || s.w < SSIM_WIN {
        return Err(Error::arg("ssim", format!("{s} is smaller than the {SSIM_WIN}×{SSIM_WIN} window")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g = gaussian_window();
    let plane = s.plane();
    let mut total = 0.0;
    for (a, b) in pred.data().chunks(plane).zip(target.data().chunks(plane)) {
        let x: Vec<f64> = a.iter().map(|v| v.f64()).collect();
        let y: Vec<f64> = b.iter().map(|v| v.f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, oh, ow) = blur(&x, s.h, s.w, &g);
        let (my, ..) = blur(&y, s.h, s.w, &g);
        let (exx, ..) = blur(&xx, s.h, s.w, &g);
        let (eyy, ..) = blur(&yy, s.h, s.w, &g);
        let (exy, ..) = blur(&xy, s.h, s.w, &g);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (vx, vy, cxy) = (exx[i] - mx[i] * mx[i], eyy[i] - my[i] * my[i], exy[i] - mx[i] * my[i]);
            let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            acc += num / den;
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / (s.n * s.c) as f64)
}
