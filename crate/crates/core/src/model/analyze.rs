//! Parameter and multiply-accumulate counts from the layer shapes alone.
//!
//! A convolution costs `out_c·out_h·out_w·in_c·k²` MACs per image; a
//! transposed convolution `in_h·in_w·in_c·out_c·k²`. Bias, normalization and
//! activations are free.

use crate::error::{Error, Result};
use crate::ops::NormKind;
use crate::tensor::Shape4;

use super::HinetConfig;

#[derive(Default)]
struct Tally {
    macs: u64,
    params: u64,
    convs: usize,
    transposed: usize,
}

impl Tally {
    fn conv(&mut self, cin: usize, cout: usize, k: usize, oh: usize, ow: usize) {
        self.macs += (cout * oh * ow * cin * k * k) as u64;
        self.params += (cout * cin * k * k + cout) as u64;
        self.convs += 1;
    }

    fn conv_t(&mut self, cin: usize, cout: usize, k: usize, ih: usize, iw: usize) {
        self.macs += (ih * iw * cin * cout * k * k) as u64;
        self.params += (cin * cout * k * k + cout) as u64;
        self.transposed += 1;
    }

    fn norm(&mut self, kind: NormKind, c: usize) {
        self.params += match kind {
            NormKind::None => 0,
            NormKind::InstanceHalf => c as u64,
            _ => 2 * c as u64,
        };
    }

    fn res(&mut self, c: usize, h: usize, w: usize, hin: bool) {
        self.conv(c, c, 3, h, w);
        self.conv(c, c, 3, h, w);
        if hin {
            self.norm(NormKind::InstanceHalf, c);
        }
    }
}

fn walk(cfg: &HinetConfig, h: usize, w: usize) -> Tally {
    let widths = cfg.widths();
    let (w0, img, levels) = (widths[0], cfg.img_channels, cfg.levels);
    let mut t = Tally::default();
    for stage in 0..cfg.stages {
        t.conv(img, w0, 3, h, w);
        if stage == 1 {
            t.conv(2 * w0, w0, 3, h, w);
        }
        for (l, &c) in widths.iter().enumerate() {
            let (lh, lw) = (h >> l, w >> l);
            t.conv(c, c, 3, lh, lw);
            t.conv(c, c, 3, lh, lw);
            t.conv(c, c, 1, lh, lw);
            t.norm(if cfg.hin_mask[l] { NormKind::InstanceHalf } else { cfg.norm_kind }, c);
            if cfg.deeper {
                t.res(c, lh, lw, false);
                t.res(c, lh, lw, false);
            }
            if stage == 1 && cfg.csff && l + 1 < levels {
                t.conv(c, c, 3, lh, lw);
                t.conv(c, c, 3, lh, lw);
            }
            if l + 1 < levels {
                t.conv(c, 2 * c, 4, lh / 2, lw / 2);
            }
        }
        for (l, &c) in widths.iter().enumerate().take(levels - 1) {
            let (lh, lw) = (h >> l, w >> l);
            t.conv_t(2 * c, c, 2, lh / 2, lw / 2);
            if cfg.skip_fusion {
                t.conv(2 * c, c, 3, lh, lw);
            }
            let blocks = if cfg.deeper { 3 } else { 1 };
            for _ in 0..blocks {
                t.res(c, lh, lw, cfg.decoder_hin);
            }
        }
        if stage + 1 == cfg.stages {
            t.conv(w0, img, 3, h, w);
        } else {
            // supervised attention: feature, image and mask convs
            t.conv(w0, w0, 3, h, w);
            t.conv(w0, img, 3, h, w);
            t.conv(img, w0, 3, h, w);
        }
    }
    t
}

/// Multiply-accumulates for one forward pass on `input`.
pub fn count_macs(cfg: &HinetConfig, input: Shape4) -> Result<u64> {
    cfg.validate()?;
    let d = cfg.size_divisor();
    if input.c != cfg.img_channels || !input.h.is_multiple_of(d) || !input.w.is_multiple_of(d) {
        return Err(Error::arg(
            "count_macs",
            format!("input {input} needs {} channels and extents divisible by {d}", cfg.img_channels),
        ));
    }
    Ok(walk(cfg, input.h, input.w).macs * input.n as u64)
}

/// Trainable scalar count (batch-norm running statistics excluded).
pub fn count_params(cfg: &HinetConfig) -> Result<u64> {
    cfg.validate()?;
    let d = cfg.size_divisor();
    Ok(walk(cfg, d, d).params)
}

/// Width and resolution of one encoder level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelRow {
    pub level: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hin: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockInventory {
    pub stages: usize,
    pub hin_blocks: usize,
    /// Encoder blocks using another normalization (or none).
    pub other_encoder_blocks: usize,
    pub res_blocks: usize,
    pub decoder_hin_blocks: usize,
    pub downsamples: usize,
    pub upsamples: usize,
    pub fuse_convs: usize,
    pub sam: usize,
    pub csff_pairs: usize,
    pub convs: usize,
    pub transposed_convs: usize,
    pub levels: Vec<LevelRow>,
}

pub fn inventory(cfg: &HinetConfig, input: Shape4) -> Result<BlockInventory> {
    cfg.validate()?;
    let t = walk(cfg, input.h, input.w);
    let (s, l) = (cfg.stages, cfg.levels);
    let hin = cfg.hin_mask.iter().filter(|&&b| b).count();
    let per_block_extra = if cfg.deeper { 2 } else { 0 };
    let res_per_stage = (l - 1) + per_block_extra * (l + l - 1);
    let dec_blocks = (l - 1) * (1 + per_block_extra);
    Ok(BlockInventory {
        stages: s,
        hin_blocks: hin * s,
        other_encoder_blocks: (l - hin) * s,
        res_blocks: res_per_stage * s,
        decoder_hin_blocks: if cfg.decoder_hin { dec_blocks * s } else { 0 },
        downsamples: (l - 1) * s,
        upsamples: (l - 1) * s,
        fuse_convs: if cfg.skip_fusion { (l - 1) * s } else { 0 },
        sam: usize::from(s == 2),
        csff_pairs: if s == 2 && cfg.csff { l - 1 } else { 0 },
        convs: t.convs,
        transposed_convs: t.transposed,
        levels: cfg
            .widths()
            .iter()
            .enumerate()
            .map(|(k, &c)| LevelRow {
                level: k,
                channels: c,
                height: input.h >> k,
                width: input.w >> k,
                hin: cfg.hin_mask[k],
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::Hinet;
    use crate::rng::RngState;
    use crate::tensor::Tensor;

    fn img(n: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, 3, h, w).unwrap()
    }

    #[test]
    fn full_size_counts() {
        let full = count_macs(&HinetConfig::hinet(1.0), img(1, 256, 256)).unwrap();
        let half = count_macs(&HinetConfig::hinet(0.5), img(1, 256, 256)).unwrap();
        // frozen values of the analytic walk
        assert_eq!(full, 176_928_325_632);
        assert_eq!(half, 44_373_639_168);
        let quarter = count_macs(&HinetConfig::hinet(1.0), img(1, 128, 128)).unwrap();
        assert_eq!(quarter * 4, full);
    }

    #[test]
    fn macs_grow_with_scale_and_area() {
        let mut last = 0;
        for s in [0.25, 0.5, 0.75, 1.0, 1.5] {
            let m = count_macs(&HinetConfig::hinet(s), img(1, 64, 64)).unwrap();
            assert!(m > last);
            last = m;
        }
        let a = count_macs(&HinetConfig::hinet(1.0), img(1, 64, 64)).unwrap();
        let b = count_macs(&HinetConfig::hinet(1.0), img(1, 64, 80)).unwrap();
        assert!(b > a);
    }

    #[test]
    fn analytic_counts_match_built_network() {
        let mut rng = RngState::new(1);
        let mut configs = vec![
            HinetConfig::tiny(4),
            HinetConfig {
                deeper: true,
                decoder_hin: true,
                ..HinetConfig::tiny(4)
            },
            HinetConfig {
                base_width: 4,
                ..HinetConfig::simple(1.0).with_norm(NormKind::BatchThenInstanceHalf)
            },
            HinetConfig {
                csff: false,
                skip_fusion: false,
                ..HinetConfig::tiny(6)
            },
        ];
        for kind in NormKind::all(2) {
            configs.push(HinetConfig { base_width: 4, ..HinetConfig::simple(1.0).with_norm(kind) });
        }
        for cfg in configs {
            let net: Hinet = Hinet::build(cfg.clone(), &mut rng).unwrap();
            assert_eq!(count_params(&cfg).unwrap(), net.params.trainable_count() as u64, "{cfg:?}");
            let shape = img(2, 32, 16);
            let mut tape = Tape::inference();
            let x = tape.leaf(Tensor::zeros(shape));
            net.forward(&mut tape, x).unwrap();
            assert_eq!(count_macs(&cfg, shape).unwrap(), tape.macs(), "{cfg:?}");
            let inv = inventory(&cfg, shape).unwrap();
            let (hin, res) = net.block_count();
            assert_eq!((inv.hin_blocks, inv.res_blocks), (hin, res));
        }
    }

    #[test]
    fn single_conv_example() {
        let spec = crate::ops::ConvSpec::conv3x3(3, 64);
        assert_eq!(spec.macs(1, 256, 256), 113_246_208);
    }
}
