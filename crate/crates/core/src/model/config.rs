use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ops::{NormKind, NORM_EPS};

/// Architecture description of a (one- or two-stage) HINet.
#[derive(Clone, Debug, PartialEq)]
pub struct HinetConfig {
    pub base_width: usize,
    pub scale: f64,
    pub levels: usize,
    /// Per encoder level: HIN block (true) or `norm_kind` in the norm slot.
    pub hin_mask: Vec<bool>,
    pub norm_kind: NormKind,
    /// Two extra ResBlocks after every encoder and decoder block.
    pub deeper: bool,
    pub img_channels: usize,
    pub stages: usize,
    /// Concatenate encoder features into the decoder.
    pub skip_fusion: bool,
    /// Cross-stage feature fusion (two-stage only).
    pub csff: bool,
    /// Half instance norm inside decoder ResBlocks.
    pub decoder_hin: bool,
    pub norm_eps: f64,
}

impl Default for HinetConfig {
    fn default() -> Self {
        HinetConfig {
            base_width: 64,
            scale: 1.0,
            levels: 5,
            hin_mask: vec![true; 5],
            norm_kind: NormKind::None,
            deeper: false,
            img_channels: 3,
            stages: 2,
            skip_fusion: true,
            csff: true,
            decoder_hin: false,
            norm_eps: NORM_EPS,
        }
    }
}

pub const CONFIG_KEYS: [&str; 12] = [
    "base_width",
    "scale",
    "levels",
    "hin_mask",
    "norm_kind",
    "deeper",
    "img_channels",
    "stages",
    "skip_fusion",
    "csff",
    "decoder_hin",
    "norm_eps",
];

/// The twelve HIN placements of the per-level ablation: encoder mask and
/// whether the decoder also gets HIN.
pub const PLACEMENT_ROWS: [([bool; 5], bool); 12] = {
    const T: bool = true;
    const F: bool = false;
    [
        ([F, F, F, F, F], F),
        ([T, T, F, F, F], F),
        ([F, T, T, F, F], F),
        ([F, F, T, T, F], F),
        ([F, F, F, T, T], F),
        ([T, T, T, F, F], F),
        ([F, T, T, T, F], F),
        ([F, F, T, T, T], F),
        ([T, T, T, T, F], F),
        ([F, T, T, T, T], F),
        ([T, T, T, T, T], F),
        ([T, T, T, T, T], T),
    ]
};

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn mask_string(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

impl HinetConfig {
    /// Two-stage network at width scale `s`.
    pub fn hinet(scale: f64) -> Self {
        HinetConfig {
            scale,
            ..Default::default()
        }
    }

    /// Single U-Net without encoder–decoder skips, as used for the
    /// normalization ablations.
    pub fn simple(scale: f64) -> Self {
        HinetConfig {
            scale,
            stages: 1,
            skip_fusion: false,
            csff: false,
            ..Default::default()
        }
    }

    /// A small two-stage network for tests and desk-scale training.
    pub fn tiny(base_width: usize) -> Self {
        HinetConfig {
            base_width,
            ..Default::default()
        }
    }

    /// One normalization variant in every encoder
    /// block; `instance_half` maps to the HIN mask.
    pub fn with_norm(mut self, kind: NormKind) -> Self {
        if kind == NormKind::InstanceHalf {
            self.hin_mask = vec![true; self.levels];
            self.norm_kind = NormKind::None;
        } else {
            self.hin_mask = vec![false; self.levels];
            self.norm_kind = kind;
        }
        self
    }

    pub fn with_placement(mut self, row: usize) -> Result<Self> {
        let (mask, dec) = PLACEMENT_ROWS
            .get(row)
            .ok_or_else(|| Error::Config(format!("placement row {row} out of range 0..12")))?;
        self.levels = 5;
        self.hin_mask = mask.to_vec();
        self.decoder_hin = *dec;
        Ok(self)
    }

    /// Channels at level 0.
    pub fn width0(&self) -> usize {
        (self.base_width as f64 * self.scale).round() as usize
    }

    /// Channels at every encoder level.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.width0() << l).collect()
    }

    /// Spatial extents must be multiples of this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels != 5 {
            return bad(format!("levels must be 5, got {}", self.levels));
        }
        if self.hin_mask.len() != self.levels {
            return bad(format!("hin_mask has {} flags for {} levels", self.hin_mask.len(), self.levels));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if self.width0() == 0 {
            return bad(format!("base_width {} at scale {} rounds to zero channels", self.base_width, self.scale));
        }
        if !(self.stages == 1 || self.stages == 2) {
            return bad(format!("stages must be 1 or 2, got {}", self.stages));
        }
        if self.img_channels == 0 {
            return bad("img_channels must be at least 1".into());
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return bad(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        for (l, &w) in self.widths().iter().enumerate() {
            if self.hin_mask[l] && w % 2 != 0 {
                return bad(format!("width {w} at level {l} must be even for HIN"));
            }
            if !self.hin_mask[l] {
                self.norm_kind
                    .validate(w)
                    .map_err(|e| Error::Config(format!("level {l}: {e}")))?;
            }
            if self.decoder_hin && l + 1 < self.levels && w % 2 != 0 {
                return bad(format!("width {w} at decoder level {l} must be even for HIN"));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "base_width" => self.base_width.to_string(),
            "scale" => self.scale.to_string(),
            "levels" => self.levels.to_string(),
            "hin_mask" => mask_string(&self.hin_mask),
            "norm_kind" => self.norm_kind.to_string(),
            "deeper" => self.deeper.to_string(),
            "img_channels" => self.img_channels.to_string(),
            "stages" => self.stages.to_string(),
            "skip_fusion" => self.skip_fusion.to_string(),
            "csff" => self.csff.to_string(),
            "decoder_hin" => self.decoder_hin.to_string(),
            "norm_eps" => self.norm_eps.to_string(),
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        })
    }

    /// Sets one key from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "base_width" => self.base_width = parse_num(key, v)?,
            "scale" => self.scale = parse_num(key, v)?,
            "levels" => {
                self.levels = parse_num(key, v)?;
                self.hin_mask.resize(self.levels, true);
            }
            "hin_mask" => {
                self.hin_mask = v
                    .chars()
                    .filter(|c| !matches!(c, ',' | ' ' | '_'))
                    .map(|c| match c {
                        '1' | 't' | 'T' => Ok(true),
                        '0' | 'f' | 'F' | '-' => Ok(false),
                        other => Err(Error::Config(format!("hin_mask: bad flag `{other}`"))),
                    })
                    .collect::<Result<_>>()?
            }
            "norm_kind" => self.norm_kind = v.parse()?,
            "deeper" => self.deeper = parse_bool(key, v)?,
            "img_channels" => self.img_channels = parse_num(key, v)?,
            "stages" => self.stages = parse_num(key, v)?,
            "skip_fusion" => self.skip_fusion = parse_bool(key, v)?,
            "csff" => self.csff = parse_bool(key, v)?,
            "decoder_hin" => self.decoder_hin = parse_bool(key, v)?,
            "norm_eps" => self.norm_eps = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical `key = value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("known key"));
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = HinetConfig::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_follow_doubling() {
        assert_eq!(HinetConfig::hinet(1.0).widths(), vec![64, 128, 256, 512, 1024]);
        assert_eq!(HinetConfig::hinet(0.5).widths(), vec![32, 64, 128, 256, 512]);
    }

    #[test]
    fn kv_round_trip() {
        let mut c = HinetConfig::tiny(8).with_norm(NormKind::Group(2));
        c.deeper = true;
        c.scale = 0.75;
        let back = HinetConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_kv(), c.to_kv());
    }

    #[test]
    fn invalid_configs_name_the_problem() {
        let mut c = HinetConfig::tiny(3);
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("even"), "{e}");
        c.hin_mask = vec![false; 5];
        c.norm_kind = NormKind::Group(2);
        assert!(c.validate().unwrap_err().to_string().contains("level 0"));
        assert!(HinetConfig::from_kv("widht = 3").unwrap_err().to_string().contains("unknown"));
        let mut c = HinetConfig::default();
        c.levels = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn placement_rows_build_masks() {
        for row in 0..12 {
            let c = HinetConfig::simple(0.5).with_placement(row).unwrap();
            c.validate().unwrap();
        }
        assert!(HinetConfig::simple(0.5).with_placement(12).is_err());
    }
}
