//! Composite blocks: HIN block, ResBlock, supervised attention, cross-stage
//! fusion and the resampling convolutions.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{ConvLayer, ConvSpec, NormKind, NormLayer, ParamBuilder, LEAKY_SLOPE};
use crate::tensor::Real;

fn lrelu<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    tape.leaky_relu(x, T::of(LEAKY_SLOPE))
}

/// Intermediate values of one HIN block pass.
#[derive(Clone, Copy, Debug)]
pub struct HinTrace {
    pub f_mid: Var,
    pub f_norm: Var,
    pub out: Var,
}

/// `conv3x3 → norm → lrelu → conv3x3 → lrelu`, plus a 1×1 projection of the
/// input. With `use_hin` the norm slot is instance norm on the first half of
/// the channels; otherwise it is `norm_kind`.
#[derive(Clone, Debug)]
pub struct HinBlock {
    pub conv1: ConvLayer,
    pub norm: NormLayer,
    pub conv2: ConvLayer,
    pub shortcut: ConvLayer,
    pub eps: f64,
}

impl HinBlock {
    pub fn build<T: Real>(
        b: &mut ParamBuilder<'_, T>,
        in_c: usize,
        out_c: usize,
        use_hin: bool,
        norm_kind: NormKind,
        eps: f64,
    ) -> Result<Self> {
        let kind = if use_hin { NormKind::InstanceHalf } else { norm_kind };
        Ok(HinBlock {
            conv1: b.conv("conv1", ConvSpec::conv3x3(in_c, out_c))?,
            norm: NormLayer::build(&mut b.scope("norm"), kind, out_c)?,
            conv2: b.conv("conv2", ConvSpec::conv3x3(out_c, out_c))?,
            shortcut: b.conv("shortcut", ConvSpec::conv1x1(in_c, out_c))?,
            eps,
        })
    }

    pub fn use_hin(&self) -> bool {
        self.norm.kind() == NormKind::InstanceHalf
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, store, x)?.out)
    }

    pub fn forward_traced<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<HinTrace> {
        let f_mid = self.conv1.forward(tape, store, x)?;
        let f_norm = self.norm.forward(tape, store, f_mid, self.eps)?;
        let a = lrelu(tape, f_norm);
        let r = self.conv2.forward(tape, store, a)?;
        let r_out = lrelu(tape, r);
        let skip = self.shortcut.forward(tape, store, x)?;
        let out = tape.add(r_out, skip)?;
        Ok(HinTrace { f_mid, f_norm, out })
    }
}

/// `conv3x3 → lrelu → conv3x3 → lrelu` plus identity, without normalization
/// unless built with half instance norm after the first conv.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: ConvLayer,
    pub norm: NormLayer,
    pub conv2: ConvLayer,
    pub eps: f64,
}

impl ResBlock {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, use_hin: bool, eps: f64) -> Result<Self> {
        let conv1 = b.conv("conv1", ConvSpec::conv3x3(channels, channels))?;
        let norm = if use_hin {
            NormLayer::build(&mut b.scope("norm"), NormKind::InstanceHalf, channels)?
        } else {
            NormLayer::None
        };
        let conv2 = b.conv("conv2", ConvSpec::conv3x3(channels, channels))?;
        Ok(ResBlock { conv1, norm, conv2, eps })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.norm.forward(tape, store, h, self.eps)?;
        let h = lrelu(tape, h);
        let h = self.conv2.forward(tape, store, h)?;
        let h = lrelu(tape, h);
        tape.add(h, x)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SamOutput {
    pub features: Var,
    pub restored: Var,
    pub mask: Var,
}

/// Supervised attention between stages; every conv is 3×3 with bias.
#[derive(Clone, Debug)]
pub struct Sam {
    pub feat_conv: ConvLayer,
    pub img_conv: ConvLayer,
    pub mask_conv: ConvLayer,
}

impl Sam {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, channels: usize, img_channels: usize) -> Result<Self> {
        Ok(Sam {
            feat_conv: b.conv("feat_conv", ConvSpec::conv3x3(channels, channels))?,
            img_conv: b.conv("img_conv", ConvSpec::conv3x3(channels, img_channels))?,
            mask_conv: b.conv("mask_conv", ConvSpec::conv3x3(img_channels, channels))?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var, x_img: Var) -> Result<SamOutput> {
        let (sf, sx) = (tape.shape(f), tape.shape(x_img));
        if (sf.n, sf.h, sf.w) != (sx.n, sx.h, sx.w) {
            return Err(Error::arg("sam", format!("features {sf} and image {sx} are not aligned")));
        }
        let residual = self.img_conv.forward(tape, store, f)?;
        let restored = tape.add(residual, x_img)?;
        let m = self.mask_conv.forward(tape, store, restored)?;
        let mask = tape.sigmoid(m);
        let g = self.feat_conv.forward(tape, store, f)?;
        let gated = tape.mul(mask, g)?;
        let features = tape.add(f, gated)?;
        Ok(SamOutput { features, restored, mask })
    }
}

/// Cross-stage fusion: one pair of 3×3 convs per scale.
#[derive(Clone, Debug)]
pub struct Csff {
    pub enc: Vec<ConvLayer>,
    pub dec: Vec<ConvLayer>,
}

impl Csff {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, widths: &[usize]) -> Result<Self> {
        let mut enc = Vec::with_capacity(widths.len());
        let mut dec = Vec::with_capacity(widths.len());
        for (k, &c) in widths.iter().enumerate() {
            enc.push(b.conv(&format!("enc{k}"), ConvSpec::conv3x3(c, c))?);
            dec.push(b.conv(&format!("dec{k}"), ConvSpec::conv3x3(c, c))?);
        }
        Ok(Csff { enc, dec })
    }

    pub fn scales(&self) -> usize {
        self.enc.len()
    }

    /// `conv(enc1[k]) + conv(dec1[k])` for every scale `k`.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, enc1: &[Var], dec1: &[Var]) -> Result<Vec<Var>> {
        if enc1.len() != self.scales() || dec1.len() != self.scales() {
            return Err(Error::arg(
                "csff",
                format!("expected {} scales, got {} encoder / {} decoder maps", self.scales(), enc1.len(), dec1.len()),
            ));
        }
        let mut out = Vec::with_capacity(self.scales());
        for k in 0..self.scales() {
            if tape.shape(enc1[k]) != tape.shape(dec1[k]) {
                return Err(Error::ShapeMismatch {
                    op: "csff",
                    expected: tape.shape(enc1[k]),
                    got: tape.shape(dec1[k]),
                });
            }
            let a = self.enc[k].forward(tape, store, enc1[k])?;
            let d = self.dec[k].forward(tape, store, dec1[k])?;
            out.push(tape.add(a, d)?);
        }
        Ok(out)
    }
}

/// 4×4 stride-2 conv: halves the spatial extent, doubles channels.
#[derive(Clone, Debug)]
pub struct Downsample(pub ConvLayer);

impl Downsample {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Downsample(b.conv(name, ConvSpec::down4x4(channels, 2 * channels))?))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::arg("downsample", format!("odd spatial extent in {s}")));
        }
        self.0.forward(tape, store, x)
    }
}

/// 2×2 stride-2 transposed conv: doubles the spatial extent, halves channels.
#[derive(Clone, Debug)]
pub struct Upsample(pub ConvLayer);

impl Upsample {
    pub fn build<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::arg("upsample", format!("odd channel count {channels}")));
        }
        Ok(Upsample(b.conv_transpose(name, ConvSpec::up2x2(channels, channels / 2))?))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.0.forward(tape, store, x)
    }
}
