//! Normalization layers: batch, layer, instance, group, and the half-channel
//! variants used by HIN blocks.
//!
//! All statistics use the population variance. Each variant normalizes over
//! a different set of elements:
//!
//! | variant  | statistics over          |
//! |----------|--------------------------|
//! | batch    | (n, h, w) per channel    |
//! | layer    | (c, h, w) per instance   |
//! | instance | (h, w) per instance-channel |
//! | group(g) | (h, w, c in group) per instance-group |
//!
//! `instance_half` normalizes the first half of the channels per instance and
//! passes the second half through untouched. `batch_then_instance_half` is the
//! IBN arrangement: instance norm on the first half, batch norm on the second.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{neumaier, Real, Shape4, Tensor};

use super::layer::ParamBuilder;

/// Default epsilon inside `sqrt(var + eps)`.
pub const NORM_EPS: f64 = 1e-5;
/// Weight of the newest batch in running-statistic updates.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum NormKind {
    #[default]
    None,
    Batch,
    Layer,
    Instance,
    Group(usize),
    InstanceHalf,
    BatchThenInstanceHalf,
}

impl NormKind {
    /// Every variant, with `group_count` groups for the group variant.
    pub fn all(group_count: usize) -> [NormKind; 7] {
        [
            NormKind::None,
            NormKind::Batch,
            NormKind::Layer,
            NormKind::Instance,
            NormKind::Group(group_count),
            NormKind::InstanceHalf,
            NormKind::BatchThenInstanceHalf,
        ]
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        match *self {
            NormKind::Group(g) if g == 0 || !channels.is_multiple_of(g) => Err(Error::arg(
                "normalize",
                format!("group count {g} does not divide {channels} channels"),
            )),
            NormKind::InstanceHalf | NormKind::BatchThenInstanceHalf if !channels.is_multiple_of(2) => Err(Error::arg(
                "normalize",
                format!("{self} needs an even channel count, got {channels}"),
            )),
            _ => Ok(()),
        }
    }

    /// Whether this variant keeps running statistics.
    pub fn has_running_stats(&self) -> bool {
        matches!(self, NormKind::Batch | NormKind::BatchThenInstanceHalf)
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::None => write!(f, "none"),
            NormKind::Batch => write!(f, "batch"),
            NormKind::Layer => write!(f, "layer"),
            NormKind::Instance => write!(f, "instance"),
            NormKind::Group(g) => write!(f, "group:{g}"),
            NormKind::InstanceHalf => write!(f, "instance_half"),
            NormKind::BatchThenInstanceHalf => write!(f, "batch_then_instance_half"),
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "none" => NormKind::None,
            "batch" | "bn" => NormKind::Batch,
            "layer" | "ln" => NormKind::Layer,
            "instance" | "in" => NormKind::Instance,
            "instance_half" | "hin" => NormKind::InstanceHalf,
            "batch_then_instance_half" | "ibn" => NormKind::BatchThenInstanceHalf,
            other => {
                let groups = other
                    .strip_prefix("group:")
                    .or_else(|| other.strip_prefix("gn:"))
                    .and_then(|g| g.parse().ok())
                    .ok_or_else(|| Error::Config(format!("unknown norm kind `{other}`")))?;
                NormKind::Group(groups)
            }
        })
    }
}

/// Which elements share statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    Instance,
    Layer,
    Group(usize),
    Batch,
}

impl Grouping {
    fn count(&self, s: Shape4) -> usize {
        match *self {
            Grouping::Instance => s.n * s.c,
            Grouping::Layer => s.n,
            Grouping::Group(g) => s.n * g,
            Grouping::Batch => s.c,
        }
    }

    #[inline]
    fn group_of(&self, s: Shape4, n: usize, c: usize) -> usize {
        match *self {
            Grouping::Instance => n * s.c + c,
            Grouping::Layer => n,
            Grouping::Group(g) => n * g + c / (s.c / g),
            Grouping::Batch => c,
        }
    }
}

/// Saved forward state for the backward pass.
pub struct NormCache<T: Real> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
    grouping: Grouping,
    fixed: bool,
}

/// Normalizes `x` per group, then applies the per-channel affine map.
///
/// With `fixed = Some((mean, var))` (per-channel `1×C×1×1`) those statistics
/// are used instead of batch statistics. Returns the output, the cache, and
/// the per-group means and variances that were used.
#[allow(clippy::type_complexity)]
pub fn normalize_forward<T: Real>(
    x: &Tensor<T>,
    gamma: Option<&Tensor<T>>,
    beta: Option<&Tensor<T>>,
    grouping: Grouping,
    eps: f64,
    fixed: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<(Tensor<T>, NormCache<T>, Vec<f64>, Vec<f64>)> {
    let s = x.shape();
    if let Grouping::Group(g) = grouping {
        NormKind::Group(g).validate(s.c)?;
    }
    let affine_shape = Shape4 { n: 1, c: s.c, h: 1, w: 1 };
    for p in gamma.iter().chain(beta.iter()) {
        p.expect_shape("normalize affine", affine_shape)?;
    }
    if !(eps > 0.0) {
        return Err(Error::arg("normalize", format!("eps must be > 0, got {eps}")));
    }
    let plane = s.plane();
    let groups = grouping.count(s);

    let (means, vars) = match fixed {
        Some((m, v)) => {
            if grouping != Grouping::Batch {
                return Err(Error::arg("normalize", "fixed statistics are per-channel only"));
            }
            m.expect_shape("running mean", affine_shape)?;
            v.expect_shape("running var", affine_shape)?;
            (
                m.data().iter().map(|v| v.f64()).collect::<Vec<_>>(),
                v.data().iter().map(|v| v.f64()).collect::<Vec<_>>(),
            )
        }
        None => {
            let mut sum = vec![0.0f64; groups];
            let mut count = vec![0usize; groups];
            for (nc, chunk) in x.data().chunks(plane).enumerate() {
                let gi = grouping.group_of(s, nc / s.c, nc % s.c);
                sum[gi] += neumaier(chunk.iter().map(|v| v.f64()));
                count[gi] += plane;
            }
            let means: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
            let mut sq = vec![0.0f64; groups];
            for (nc, chunk) in x.data().chunks(plane).enumerate() {
                let gi = grouping.group_of(s, nc / s.c, nc % s.c);
                let m = means[gi];
                sq[gi] += neumaier(chunk.iter().map(|v| (v.f64() - m).powi(2)));
            }
            let vars = sq.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
            (means, vars)
        }
    };
    let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let mut xhat = Vec::with_capacity(s.numel());
    let mut y = Vec::with_capacity(s.numel());
    for (nc, chunk) in x.data().chunks(plane).enumerate() {
        let c = nc % s.c;
        let gi = grouping.group_of(s, nc / s.c, c);
        let (m, inv) = (means[gi], inv_std[gi]);
        let g = gamma.map_or(1.0, |g| g.data()[c].f64());
        let b = beta.map_or(0.0, |b| b.data()[c].f64());
        for v in chunk {
            let h = (v.f64() - m) * inv;
            xhat.push(T::of(h));
            y.push(T::of(g * h + b));
        }
    }
    let cache = NormCache {
        xhat: Tensor::from_vec(s, xhat)?,
        inv_std,
        grouping,
        fixed: fixed.is_some(),
    };
    Ok((Tensor::from_vec(s, y)?, cache, means, vars))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn normalize_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &NormCache<T>,
    gamma: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let s = dy.shape();
    let plane = s.plane();
    let groups = cache.grouping.count(s);
    let xhat = cache.xhat.data();

    let mut dgamma = vec![0.0f64; s.c];
    let mut dbeta = vec![0.0f64; s.c];
    let mut m1 = vec![0.0f64; groups];
    let mut m2 = vec![0.0f64; groups];
    let mut count = vec![0usize; groups];
    for (nc, chunk) in dy.data().chunks(plane).enumerate() {
        let c = nc % s.c;
        let gi = cache.grouping.group_of(s, nc / s.c, c);
        let g = gamma.map_or(1.0, |g| g.data()[c].f64());
        let xh = &xhat[nc * plane..(nc + 1) * plane];
        for (d, h) in chunk.iter().zip(xh) {
            let (d, h) = (d.f64(), h.f64());
            dgamma[c] += d * h;
            dbeta[c] += d;
            m1[gi] += d * g;
            m2[gi] += d * g * h;
        }
        count[gi] += plane;
    }
    for gi in 0..groups {
        m1[gi] /= count[gi] as f64;
        m2[gi] /= count[gi] as f64;
    }

    let mut dx = Vec::with_capacity(s.numel());
    for (nc, chunk) in dy.data().chunks(plane).enumerate() {
        let c = nc % s.c;
        let gi = cache.grouping.group_of(s, nc / s.c, c);
        let g = gamma.map_or(1.0, |g| g.data()[c].f64());
        let inv = cache.inv_std[gi];
        let xh = &xhat[nc * plane..(nc + 1) * plane];
        for (d, h) in chunk.iter().zip(xh) {
            let dxhat = d.f64() * g;
            let v = if cache.fixed {
                dxhat * inv
            } else {
                inv * (dxhat - m1[gi] - h.f64() * m2[gi])
            };
            dx.push(T::of(v));
        }
    }
    let cs = Shape4 { n: 1, c: s.c, h: 1, w: 1 };
    Ok((
        Tensor::from_vec(s, dx)?,
        Tensor::from_vec(cs, dgamma.into_iter().map(T::of).collect())?,
        Tensor::from_vec(cs, dbeta.into_iter().map(T::of).collect())?,
    ))
}

/// Running mean/variance handles of a batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct RunningStats {
    pub mean: ParamId,
    pub var: ParamId,
}

impl<T: Real> Tape<T> {
    /// Per-(instance, channel) normalization over the spatial pixels.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        Ok(self.grouping_norm(x, Some((gamma, beta)), Grouping::Instance, eps, None)?.0)
    }

    /// Per-instance normalization over channels and pixels.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        Ok(self.grouping_norm(x, Some((gamma, beta)), Grouping::Layer, eps, None)?.0)
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        NormKind::Group(groups).validate(self.shape(x).c)?;
        Ok(self.grouping_norm(x, Some((gamma, beta)), Grouping::Group(groups), eps, None)?.0)
    }

    /// Batch statistics in training mode (recording a running-statistic
    /// update), running statistics in inference mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: RunningStats,
        store: &ParamStore<T>,
        eps: f64,
    ) -> Result<Var> {
        let old_mean = store.get(running.mean).value();
        let old_var = store.get(running.var).value();
        if !self.is_training() {
            let (y, _, _) = self.grouping_norm(x, Some((gamma, beta)), Grouping::Batch, eps, Some((old_mean, old_var)))?;
            return Ok(y);
        }
        let (y, means, vars) = self.grouping_norm(x, Some((gamma, beta)), Grouping::Batch, eps, None)?;
        let blend = |old: &Tensor<T>, new: &[f64]| {
            let data = old
                .data()
                .iter()
                .zip(new)
                .map(|(o, n)| T::of((1.0 - BN_MOMENTUM) * o.f64() + BN_MOMENTUM * n))
                .collect();
            Tensor::from_vec(old.shape(), data)
        };
        let new_mean = blend(old_mean, &means)?;
        let new_var = blend(old_var, &vars)?;
        self.push_state_update(running.mean, new_mean);
        self.push_state_update(running.var, new_var);
        Ok(y)
    }

    pub fn normalize(&mut self, x: Var, layer: &NormLayer, store: &ParamStore<T>, eps: f64) -> Result<Var> {
        layer.forward(self, store, x, eps)
    }
}

/// A normalization variant together with its parameters.
#[derive(Clone, Debug)]
pub enum NormLayer {
    None,
    Batch {
        affine: (ParamId, ParamId),
        running: RunningStats,
    },
    Layer {
        affine: (ParamId, ParamId),
    },
    Instance {
        affine: (ParamId, ParamId),
    },
    Group {
        groups: usize,
        affine: (ParamId, ParamId),
    },
    InstanceHalf {
        affine: (ParamId, ParamId),
    },
    BatchThenInstanceHalf {
        in_affine: (ParamId, ParamId),
        bn_affine: (ParamId, ParamId),
        running: RunningStats,
    },
}

fn running_stats<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Result<RunningStats> {
    let s = Shape4 { n: 1, c: channels, h: 1, w: 1 };
    Ok(RunningStats {
        mean: b.tensor("running_mean", Tensor::zeros(s), false)?,
        var: b.tensor("running_var", Tensor::ones(s), false)?,
    })
}

impl NormLayer {
    /// Registers the parameters of `kind` for `channels` channels under
    /// `<scope>.<tag>.*`, where the tag names the variant.
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, kind: NormKind, channels: usize) -> Result<Self> {
        kind.validate(channels)?;
        let half = channels / 2;
        Ok(match kind {
            NormKind::None => NormLayer::None,
            NormKind::Batch => {
                let mut s = b.scope("bn");
                NormLayer::Batch {
                    affine: s.affine("affine", channels)?,
                    running: running_stats(&mut s, channels)?,
                }
            }
            NormKind::Layer => NormLayer::Layer {
                affine: b.scope("ln").affine("affine", channels)?,
            },
            NormKind::Instance => NormLayer::Instance {
                affine: b.scope("in").affine("affine", channels)?,
            },
            NormKind::Group(groups) => NormLayer::Group {
                groups,
                affine: b.scope("gn").affine("affine", channels)?,
            },
            NormKind::InstanceHalf => NormLayer::InstanceHalf {
                affine: b.scope("hin").affine("affine", half)?,
            },
            NormKind::BatchThenInstanceHalf => {
                let mut s = b.scope("ibn");
                let in_affine = s.affine("in_affine", half)?;
                let bn_affine = s.affine("bn_affine", half)?;
                NormLayer::BatchThenInstanceHalf {
                    in_affine,
                    bn_affine,
                    running: running_stats(&mut s, half)?,
                }
            }
        })
    }

    pub fn kind(&self) -> NormKind {
        match self {
            NormLayer::None => NormKind::None,
            NormLayer::Batch { .. } => NormKind::Batch,
            NormLayer::Layer { .. } => NormKind::Layer,
            NormLayer::Instance { .. } => NormKind::Instance,
            NormLayer::Group { groups, .. } => NormKind::Group(*groups),
            NormLayer::InstanceHalf { .. } => NormKind::InstanceHalf,
            NormLayer::BatchThenInstanceHalf { .. } => NormKind::BatchThenInstanceHalf,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, eps: f64) -> Result<Var> {
        match self {
            NormLayer::None => Ok(x),
            NormLayer::Batch { affine, running } => {
                let (g, b) = (tape.param(store, affine.0), tape.param(store, affine.1));
                tape.batch_norm(x, g, b, *running, store, eps)
            }
            NormLayer::Layer { affine } => {
                let (g, b) = (tape.param(store, affine.0), tape.param(store, affine.1));
                tape.layer_norm(x, g, b, eps)
            }
            NormLayer::Instance { affine } => {
                let (g, b) = (tape.param(store, affine.0), tape.param(store, affine.1));
                tape.instance_norm(x, g, b, eps)
            }
            NormLayer::Group { groups, affine } => {
                let (g, b) = (tape.param(store, affine.0), tape.param(store, affine.1));
                tape.group_norm(x, *groups, g, b, eps)
            }
            NormLayer::InstanceHalf { affine } => {
                let (first, second) = tape.channel_split(x)?;
                let (g, b) = (tape.param(store, affine.0), tape.param(store, affine.1));
                let normed = tape.instance_norm(first, g, b, eps)?;
                tape.channel_concat(normed, second)
            }
            NormLayer::BatchThenInstanceHalf {
                in_affine,
                bn_affine,
                running,
            } => {
                let (first, second) = tape.channel_split(x)?;
                let (g, b) = (tape.param(store, in_affine.0), tape.param(store, in_affine.1));
                let a = tape.instance_norm(first, g, b, eps)?;
                let (g, b) = (tape.param(store, bn_affine.0), tape.param(store, bn_affine.1));
                let c = tape.batch_norm(second, g, b, *running, store, eps)?;
                tape.channel_concat(a, c)
            }
        }
    }
}
