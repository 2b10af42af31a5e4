use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Dihedral, Shape4, Tensor};

/// A degraded/clean pair, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub tag: String,
}

/// Which flips/rotations augmentation may draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentSpec {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            hflip: true,
            vflip: true,
            rot90: true,
        }
    }
}

impl AugmentSpec {
    pub const NONE: AugmentSpec = AugmentSpec {
        hflip: false,
        vflip: false,
        rot90: false,
    };

    /// The group generated by the enabled transforms.
    pub fn transforms(&self) -> Vec<Dihedral> {
        let mut gens = Vec::new();
        if self.hflip {
            gens.push(Dihedral::hflip());
        }
        if self.vflip {
            gens.push(Dihedral::vflip());
        }
        if self.rot90 {
            gens.push(Dihedral::rot90());
        }
        let mut group = vec![Dihedral::IDENTITY];
        let mut i = 0;
        while i < group.len() {
            for g in &gens {
                let next = g.compose(group[i]);
                if !group.contains(&next) {
                    group.push(next);
                }
            }
            i += 1;
        }
        group.sort_by_key(|d| d.index());
        group
    }
}

/// Applies one uniformly drawn transform to both images.
pub fn augment(sample: &Sample, spec: &AugmentSpec, rng: &mut RngState) -> Result<Sample> {
    let s = sample.clean.shape();
    if spec.rot90 && s.h != s.w {
        return Err(Error::arg("augment", format!("rotation needs square patches, got {s}")));
    }
    let choices = spec.transforms();
    let t = choices[rng.below(choices.len())];
    Ok(Sample {
        degraded: t.apply(&sample.degraded),
        clean: t.apply(&sample.clean),
        tag: sample.tag.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Additive Gaussian noise with this standard deviation, then clipping.
    GaussianNoise(f64),
    /// `k×k` mean filter with clamp-to-edge borders.
    BoxBlur(usize),
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degradation::GaussianNoise(s) => write!(f, "gaussian_noise:{s}"),
            Degradation::BoxBlur(k) => write!(f, "box_blur:{k}"),
        }
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("degradation must be gaussian_noise:<sigma> or box_blur:<k>, got `{s}`"));
        let (kind, arg) = s.trim().split_once(':').ok_or_else(bad)?;
        match kind {
            "gaussian_noise" | "noise" => {
                // `25/255` style fractions are accepted
                let sigma = match arg.split_once('/') {
                    Some((a, b)) => a.parse::<f64>().map_err(|_| bad())? / b.parse::<f64>().map_err(|_| bad())?,
                    None => arg.parse().map_err(|_| bad())?,
                };
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(bad());
                }
                Ok(Degradation::GaussianNoise(sigma))
            }
            "box_blur" | "blur" => match arg.parse() {
                Ok(k) if k >= 1 => Ok(Degradation::BoxBlur(k)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

impl Degradation {
    pub fn apply(&self, clean: &Tensor<f32>, rng: &mut RngState) -> Result<Tensor<f32>> {
        match *self {
            Degradation::GaussianNoise(sigma) => {
                let noise = Tensor::<f32>::randn(clean.shape(), rng, 0.0, sigma)?;
                Ok(clean.add(&noise)?.clamp(0.0, 1.0))
            }
            Degradation::BoxBlur(k) => Ok(box_blur(clean, k)),
        }
    }
}

fn box_blur(x: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let s = x.shape();
    let lo = (k - 1) / 2;
    let norm = 1.0 / (k * k) as f64;
    Tensor::from_fn(s, |n, c, h, w| {
        let mut acc = 0.0f64;
        for dy in 0..k {
            let y = (h + dy).saturating_sub(lo).min(s.h - 1);
            for dx in 0..k {
                let xx = (w + dx).saturating_sub(lo).min(s.w - 1);
                acc += x.at(n, c, y, xx) as f64;
            }
        }
        (acc * norm) as f32
    })
}

/// A procedural `1×3×size×size` image: a colour gradient with random
/// rectangles and disks painted over it.
pub fn procedural_image(size: usize, rng: &mut RngState) -> Result<Tensor<f32>> {
    let shape = Shape4::new(1, 3, size, size)?;
    let mut colour = || [rng.uniform(), rng.uniform(), rng.uniform()];
    let (a, b) = (colour(), colour());
    let horizontal = rng.coin();
    let mut img = Tensor::from_fn(shape, |_, c, h, w| {
        let t = if horizontal { w } else { h } as f64 / size.max(2) as f64;
        (a[c] * (1.0 - t) + b[c] * t) as f32
    });
    let shapes = 4 + rng.below(5);
    for _ in 0..shapes {
        let col = [rng.uniform(), rng.uniform(), rng.uniform()];
        let (cy, cx) = (rng.uniform() * size as f64, rng.uniform() * size as f64);
        let r = (0.1 + 0.25 * rng.uniform()) * size as f64;
        let disk = rng.coin();
        let data = img.data_mut();
        for c in 0..3 {
            for h in 0..size {
                for w in 0..size {
                    let (dy, dx) = (h as f64 + 0.5 - cy, w as f64 + 0.5 - cx);
                    let inside = if disk { dy * dy + dx * dx <= r * r } else { dy.abs() <= r && dx.abs() <= 0.7 * r };
                    if inside {
                        data[(c * size + h) * size + w] = col[c] as f32;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Random patches of a fixed set of clean images, degraded on the fly.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub degradation: Degradation,
    pub bases: Vec<Tensor<f32>>,
    pub patch: usize,
}

impl SynthDataset {
    pub fn new(degradation: Degradation, bases: Vec<Tensor<f32>>, patch: usize) -> Result<Self> {
        if bases.is_empty() {
            return Err(Error::arg("synth_dataset", "no base images"));
        }
        for b in &bases {
            let s = b.shape();
            if patch == 0 || patch > s.h || patch > s.w {
                return Err(Error::arg("synth_dataset", format!("patch {patch} does not fit in {s}")));
            }
            if b.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::arg("synth_dataset", "base image values must lie in [0, 1]"));
            }
        }
        Ok(SynthDataset {
            degradation,
            bases,
            patch,
        })
    }

    /// `count` procedural images of side `size`.
    pub fn procedural(degradation: Degradation, count: usize, size: usize, patch: usize, rng: &mut RngState) -> Result<Self> {
        let bases = (0..count).map(|_| procedural_image(size, rng)).collect::<Result<_>>()?;
        Self::new(degradation, bases, patch)
    }

    pub fn sample(&self, rng: &mut RngState) -> Result<Sample> {
        let i = rng.below(self.bases.len());
        let base = &self.bases[i];
        let s = base.shape();
        let top = rng.below(s.h - self.patch + 1);
        let left = rng.below(s.w - self.patch + 1);
        let clean = base.crop_at(top, left, self.patch, self.patch)?;
        let degraded = self.degradation.apply(&clean, rng)?;
        Ok(Sample {
            degraded,
            clean,
            tag: format!("{}#{i}@{top},{left}", self.degradation),
        })
    }

    /// `n` samples stacked along the batch axis.
    pub fn batch(&self, n: usize, rng: &mut RngState) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let samples: Vec<Sample> = (0..n).map(|_| self.sample(rng)).collect::<Result<_>>()?;
        let deg: Vec<_> = samples.iter().map(|s| s.degraded.clone()).collect();
        let clean: Vec<_> = samples.into_iter().map(|s| s.clean).collect();
        Ok((Tensor::concat_batch(&deg)?, Tensor::concat_batch(&clean)?))
    }
}
