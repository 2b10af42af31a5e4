//! Network assembly, analytic cost model and checkpoints.

mod analyze;
mod checkpoint;
mod config;

pub use analyze::{count_macs, count_params, inventory, BlockInventory, LevelRow};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{HinetConfig, CONFIG_KEYS, PLACEMENT_ROWS};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::blocks::{Csff, Downsample, HinBlock, ResBlock, Sam, Upsample};
use crate::error::{Error, Result};
use crate::ops::{ConvLayer, ConvSpec, ParamBuilder};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
struct EncoderLevel {
    block: HinBlock,
    extra: Vec<ResBlock>,
    down: Option<Downsample>,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Upsample,
    fuse: Option<ConvLayer>,
    block: ResBlock,
    extra: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct Stage {
    init: ConvLayer,
    merge: Option<ConvLayer>,
    enc: Vec<EncoderLevel>,
    /// Indexed by level, `0..levels - 1`.
    dec: Vec<DecoderLevel>,
    out: Option<ConvLayer>,
}

/// Values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    /// Restored image of every stage, input already added.
    pub images: Vec<Var>,
    pub sam_features: Option<Var>,
    pub sam_mask: Option<Var>,
    /// Stage-1 encoder and decoder features per level.
    pub enc1: Vec<Var>,
    pub dec1: Vec<Var>,
}

impl StageOutputs {
    pub fn r1(&self) -> Var {
        self.images[0]
    }

    /// Output of the last stage.
    pub fn r2(&self) -> Var {
        *self.images.last().expect("at least one stage")
    }
}

struct StageFeatures {
    enc: Vec<Var>,
    dec: Vec<Var>,
    last: Var,
}

/// A HINet with its parameters.
#[derive(Clone, Debug)]
pub struct Hinet<T: Real = f32> {
    config: HinetConfig,
    pub params: ParamStore<T>,
    stages: Vec<Stage>,
    sam: Option<Sam>,
    csff: Option<Csff>,
}

fn build_stage<T: Real>(b: &mut ParamBuilder<'_, T>, cfg: &HinetConfig, index: usize) -> Result<Stage> {
    let widths = cfg.widths();
    let w0 = widths[0];
    let levels = cfg.levels;
    let init = b.conv("init", ConvSpec::conv3x3(cfg.img_channels, w0))?;
    let merge = if index == 1 {
        Some(b.conv("merge", ConvSpec::conv3x3(2 * w0, w0))?)
    } else {
        None
    };
    let extras = |b: &mut ParamBuilder<'_, T>, c: usize, hin: bool| -> Result<Vec<ResBlock>> {
        if !cfg.deeper {
            return Ok(Vec::new());
        }
        (0..2)
            .map(|k| ResBlock::build(&mut b.scope(&format!("res{k}")), c, hin, cfg.norm_eps))
            .collect()
    };
    let mut enc = Vec::with_capacity(levels);
    for (l, &c) in widths.iter().enumerate() {
        let mut s = b.scope(&format!("enc{l}"));
        let in_c = c;
        let block = HinBlock::build(&mut s.scope("block"), in_c, c, cfg.hin_mask[l], cfg.norm_kind, cfg.norm_eps)?;
        let extra = extras(&mut s, c, false)?;
        let down = if l + 1 < levels {
            Some(Downsample::build(&mut s, "down", c)?)
        } else {
            None
        };
        enc.push(EncoderLevel { block, extra, down });
    }
    let mut dec = Vec::with_capacity(levels - 1);
    for (l, &c) in widths.iter().enumerate().take(levels - 1) {
        let mut s = b.scope(&format!("dec{l}"));
        let up = Upsample::build(&mut s, "up", 2 * c)?;
        let fuse = if cfg.skip_fusion {
            Some(s.conv("fuse", ConvSpec::conv3x3(2 * c, c))?)
        } else {
            None
        };
        let block = ResBlock::build(&mut s.scope("block"), c, cfg.decoder_hin, cfg.norm_eps)?;
        let extra = extras(&mut s, c, cfg.decoder_hin)?;
        dec.push(DecoderLevel { up, fuse, block, extra });
    }
    // Stage 1 of a two-stage net uses SAM's image conv as its head.
    let out = if index + 1 == cfg.stages {
        Some(b.conv("out", ConvSpec::conv3x3(w0, cfg.img_channels))?)
    } else {
        None
    };
    Ok(Stage { init, merge, enc, dec, out })
}

impl<T: Real> Hinet<T> {
    /// Builds and initializes the network; deterministic for a given seed.
    pub fn build(config: HinetConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = ParamBuilder::new(&mut params, rng);
        let mut stages = Vec::with_capacity(config.stages);
        let mut sam = None;
        let mut csff = None;
        for i in 0..config.stages {
            stages.push(build_stage(&mut b.scope(&format!("s{}", i + 1)), &config, i)?);
            if i == 0 && config.stages == 2 {
                sam = Some(Sam::build(&mut b.scope("sam"), config.width0(), config.img_channels)?);
                if config.csff {
                    let widths = config.widths();
                    csff = Some(Csff::build(&mut b.scope("csff"), &widths[..config.levels - 1])?);
                }
            }
        }
        Ok(Hinet {
            config,
            params,
            stages,
            sam,
            csff,
        })
    }

    pub fn config(&self) -> &HinetConfig {
        &self.config
    }

    /// Replaces all parameters with those of `params` after checking that the
    /// names and shapes agree.
    pub fn load_params(&mut self, params: ParamStore<T>) -> Result<()> {
        checkpoint::check_compatible(&self.params, &params)?;
        self.params = params;
        Ok(())
    }

    /// Same architecture in another precision.
    pub fn cast<U: Real>(&self) -> Hinet<U> {
        Hinet {
            config: self.config.clone(),
            params: self.params.cast(),
            stages: self.stages.clone(),
            sam: self.sam.clone(),
            csff: self.csff.clone(),
        }
    }

    fn run_stage(
        &self,
        tape: &mut Tape<T>,
        stage: &Stage,
        x: Var,
        carry: Option<Var>,
        fusion: Option<&[Var]>,
    ) -> Result<StageFeatures> {
        let p = &self.params;
        let mut f = stage.init.forward(tape, p, x)?;
        if let (Some(merge), Some(c)) = (&stage.merge, carry) {
            let cat = tape.channel_concat(f, c)?;
            f = merge.forward(tape, p, cat)?;
        }
        let mut enc = Vec::with_capacity(stage.enc.len());
        for (l, level) in stage.enc.iter().enumerate() {
            f = level.block.forward(tape, p, f)?;
            for r in &level.extra {
                f = r.forward(tape, p, f)?;
            }
            if let Some(add) = fusion.and_then(|a| a.get(l)) {
                f = tape.add(f, *add)?;
            }
            enc.push(f);
            if let Some(down) = &level.down {
                f = down.forward(tape, p, f)?;
            }
        }
        let mut dec = vec![f; stage.dec.len()];
        for (l, level) in stage.dec.iter().enumerate().rev() {
            f = level.up.forward(tape, p, f)?;
            if let Some(fuse) = &level.fuse {
                let cat = tape.channel_concat(f, enc[l])?;
                f = fuse.forward(tape, p, cat)?;
            }
            f = level.block.forward(tape, p, f)?;
            for r in &level.extra {
                f = r.forward(tape, p, f)?;
            }
            dec[l] = f;
        }
        Ok(StageFeatures { enc, dec, last: f })
    }

    /// Runs every stage on `x` (`n×img_channels×h×w`, `h` and `w` multiples
    /// of 16).
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<StageOutputs> {
        let s = tape.shape(x);
        if s.c != self.config.img_channels {
            return Err(Error::arg(
                "hinet",
                format!("expected {} image channels, got {s}", self.config.img_channels),
            ));
        }
        let d = self.config.size_divisor();
        if !s.h.is_multiple_of(d) || !s.w.is_multiple_of(d) {
            return Err(Error::arg("hinet", format!("spatial extents of {s} must be multiples of {d}")));
        }
        let p = &self.params;
        let first = self.run_stage(tape, &self.stages[0], x, None, None)?;
        let mut out = StageOutputs {
            images: Vec::with_capacity(self.stages.len()),
            sam_features: None,
            sam_mask: None,
            enc1: first.enc.clone(),
            dec1: first.dec.clone(),
        };
        match (&self.sam, self.stages.get(1)) {
            (Some(sam), Some(second)) => {
                let sam_out = sam.forward(tape, p, first.last, x)?;
                out.images.push(sam_out.restored);
                out.sam_features = Some(sam_out.features);
                out.sam_mask = Some(sam_out.mask);
                let fusion = match &self.csff {
                    Some(c) => Some(c.apply(tape, p, &first.enc[..c.scales()], &first.dec)?),
                    None => None,
                };
                let feats = self.run_stage(tape, second, x, Some(sam_out.features), fusion.as_deref())?;
                out.images.push(self.head(tape, second, feats.last, x)?);
            }
            _ => out.images.push(self.head(tape, &self.stages[0], first.last, x)?),
        }
        Ok(out)
    }

    fn head(&self, tape: &mut Tape<T>, stage: &Stage, f: Var, x: Var) -> Result<Var> {
        let conv = stage.out.as_ref().expect("last stage has an output conv");
        let r = conv.forward(tape, &self.params, f)?;
        tape.add(r, x)
    }

    /// Final-stage restoration of a batch of any spatial size: reflect-pads
    /// to a multiple of 16, runs in inference mode and crops back. The flag
    /// reports whether padding was needed.
    pub fn restore(&self, x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
        let s = x.shape();
        let d = self.config.size_divisor();
        let (ph, pw) = ((d - s.h % d) % d, (d - s.w % d) % d);
        let padded = ph > 0 || pw > 0;
        let input = x.reflect_pad(ph, pw)?;
        let mut tape = Tape::inference();
        let xv = tape.leaf(input);
        let out = self.forward(&mut tape, xv)?;
        let y = tape.value(out.r2()).crop(s.h, s.w)?;
        Ok((y, padded))
    }

    /// Number of HIN and Res blocks actually instantiated.
    pub fn block_count(&self) -> (usize, usize) {
        let mut hin = 0;
        let mut res = 0;
        for st in &self.stages {
            for e in &st.enc {
                hin += usize::from(e.block.use_hin());
                res += e.extra.len();
            }
            for d in &st.dec {
                res += 1 + d.extra.len();
            }
        }
        (hin, res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::NormKind;
    use crate::tensor::Shape4;

    fn tiny() -> Hinet<f32> {
        Hinet::build(HinetConfig::tiny(4), &mut RngState::new(1)).unwrap()
    }

    #[test]
    fn output_shapes_match_input() {
        let net = tiny();
        let mut rng = RngState::new(2);
        for (h, w) in [(16, 16), (32, 48)] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::uniform(Shape4::new(2, 3, h, w).unwrap(), &mut rng, 0.0, 1.0));
            let out = net.forward(&mut tape, x).unwrap();
            assert_eq!(out.images.len(), 2);
            assert_eq!(tape.shape(out.r1()), tape.shape(x));
            assert_eq!(tape.shape(out.r2()), tape.shape(x));
            assert_eq!(out.enc1.len(), 5);
            assert_eq!(out.dec1.len(), 4);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = tiny();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape4::new(1, 1, 16, 16).unwrap()));
        assert!(net.forward(&mut tape, x).is_err());
        let x = tape.leaf(Tensor::zeros(Shape4::new(1, 3, 24, 16).unwrap()));
        assert!(net.forward(&mut tape, x).is_err());
    }

    #[test]
    fn zeroed_network_is_identity() {
        let mut net = tiny();
        net.params.zero_values();
        let x = Tensor::uniform(Shape4::new(1, 3, 16, 32).unwrap(), &mut RngState::new(3), 0.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = net.forward(&mut tape, xv).unwrap();
        assert_eq!(tape.value(out.r1()), &x);
        assert_eq!(tape.value(out.r2()), &x);
        let (y, padded) = net.restore(&x.crop(13, 21).unwrap()).unwrap();
        assert!(padded);
        assert_eq!(y, x.crop(13, 21).unwrap());
    }

    #[test]
    fn hin_off_and_no_norm_has_no_norm_parameters() {
        let cfg = HinetConfig {
            hin_mask: vec![false; 5],
            ..HinetConfig::tiny(4)
        };
        let net: Hinet = Hinet::build(cfg, &mut RngState::new(1)).unwrap();
        assert!(net.params.names().all(|n| !n.contains(".norm.")));
        assert!(tiny().params.names().any(|n| n.contains(".norm.hin.")));
    }

    #[test]
    fn deeper_adds_two_resblocks_per_block() {
        let plain = tiny();
        let deep: Hinet = Hinet::build(
            HinetConfig {
                deeper: true,
                ..HinetConfig::tiny(4)
            },
            &mut RngState::new(1),
        )
        .unwrap();
        let (h0, r0) = plain.block_count();
        let (h1, r1) = deep.block_count();
        assert_eq!(h0, h1);
        assert_eq!(r1 - r0, 2 * (5 + 4) * 2);
    }

    #[test]
    fn build_is_deterministic() {
        let a = tiny();
        let b = tiny();
        for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name(), pb.name());
            assert_eq!(pa.value(), pb.value());
        }
    }

    #[test]
    fn stage2_loss_reaches_stage1_encoder() {
        let mut net = tiny();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(Shape4::new(1, 3, 16, 16).unwrap(), &mut RngState::new(4), 0.0, 1.0));
        let out = net.forward(&mut tape, x).unwrap();
        let l = tape.mean(out.r2());
        tape.backward(l, &mut net.params).unwrap();
        for name in ["s1.enc0.block.conv1.weight", "s1.enc3.block.conv2.weight", "csff.enc1.weight"] {
            let g = net.params.by_name(name).unwrap().grad();
            assert!(g.data().iter().any(|&v| v != 0.0), "{name}");
        }
    }

    #[test]
    fn every_norm_variant_builds() {
        for kind in NormKind::all(2) {
            let cfg = HinetConfig::simple(1.0).with_norm(kind);
            let cfg = HinetConfig { base_width: 4, ..cfg };
            let net: Hinet = Hinet::build(cfg, &mut RngState::new(1)).unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::zeros(Shape4::new(2, 3, 16, 16).unwrap()));
            let out = net.forward(&mut tape, x).unwrap();
            assert_eq!(out.images.len(), 1);
        }
    }
}
