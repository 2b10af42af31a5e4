//! Binary checkpoint format.
//!
//! ```text
//! "HINETCKP" | u32 version | u32 len, config text |
//! u32 count, count × tensor |                        parameters
//! u8 has_optim [ u64 step | u32 count, count × tensor ]   optimizer moments
//! tensor = u32 name len, name | 4 × u32 extents | f32 payload
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Shape4, Tensor};

use super::{Hinet, HinetConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HINETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer moments in trainable-parameter order plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimSnapshot {
    pub step: u64,
    pub moments: Vec<(String, Tensor<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: HinetConfig,
    /// Extra `key = value` pairs echoed after the model keys (training setup).
    pub extra: Vec<(String, String)>,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optim: Option<OptimSnapshot>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Hinet<T>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            extra: Vec::new(),
            params: model
                .params
                .iter()
                .map(|(_, p)| (p.name().to_string(), p.value().cast()))
                .collect(),
            optim: None,
        }
    }

    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Builds the model described by the config echo and loads the weights.
    pub fn to_model<T: Real>(&self) -> Result<Hinet<T>> {
        let mut model = Hinet::build(self.config.clone(), &mut RngState::new(0))?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    /// Copies the weights into `model`, rejecting any name or shape mismatch.
    pub fn apply_to<T: Real>(&self, model: &mut Hinet<T>) -> Result<()> {
        let expected: Vec<(&str, Shape4)> = model.params.iter().map(|(_, p)| (p.name(), p.shape())).collect();
        let got: Vec<(&str, Shape4)> = self.params.iter().map(|(n, t)| (n.as_str(), t.shape())).collect();
        compare(&expected, &got)?;
        let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
        for (id, (_, t)) in ids.into_iter().zip(&self.params) {
            model.params.get_mut(id).set_value(t.cast())?;
        }
        Ok(())
    }

    fn config_text(&self) -> String {
        let mut s = self.config.to_kv();
        for (k, v) in &self.extra {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, self.config_text().as_bytes());
        put_tensors(&mut out, &self.params);
        match &self.optim {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                put_tensors(&mut out, &o.moments);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8, "magic").ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(Error::BadMagic { path: path.into() });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.into(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let text_len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(text_len, "config")?)
            .map_err(|_| Error::Config(format!("{path}: config echo is not UTF-8")))?;
        let mut model_text = String::new();
        let mut extra = Vec::new();
        for line in text.lines() {
            match line.split_once('=') {
                Some((k, v)) if !super::CONFIG_KEYS.contains(&k.trim()) => {
                    extra.push((k.trim().to_string(), v.trim().to_string()))
                }
                _ => {
                    model_text.push_str(line);
                    model_text.push('\n');
                }
            }
        }
        let config = HinetConfig::from_kv(&model_text)?;
        let params = r.tensors("parameters")?;
        let optim = match r.take(1, "optimizer flag")?[0] {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                Some(OptimSnapshot {
                    step,
                    moments: r.tensors("optimizer moments")?,
                })
            }
            other => return Err(Error::Config(format!("{path}: bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Config(format!("{path}: {} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            extra,
            params,
            optim,
        })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tensors(out: &mut Vec<u8>, items: &[(String, Tensor<f32>)]) {
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        put_bytes(out, name.as_bytes());
        for d in t.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.into(),
                what: what.into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self, what: &str) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = self.u32(what)? as usize;
            let name = String::from_utf8(self.take(len, what)?.to_vec())
                .map_err(|_| Error::Config(format!("{}: parameter name is not UTF-8", self.path)))?;
            let mut d = [0usize; 4];
            for e in &mut d {
                *e = self.u32(what)? as usize;
            }
            let shape = Shape4::new(d[0], d[1], d[2], d[3])
                .map_err(|e| Error::ParamMismatch { name: name.clone(), detail: e.to_string() })?;
            let payload = self.take(shape.numel() * 4, what)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.push((name, Tensor::from_vec(shape, data)?));
        }
        Ok(out)
    }
}

fn compare(expected: &[(&str, Shape4)], got: &[(&str, Shape4)]) -> Result<()> {
    for (i, (name, shape)) in expected.iter().enumerate() {
        match got.get(i) {
            None => {
                return Err(Error::ParamMismatch {
                    name: name.to_string(),
                    detail: "missing from checkpoint".into(),
                })
            }
            Some((n, _)) if n != name => {
                return Err(Error::ParamMismatch {
                    name: name.to_string(),
                    detail: format!("checkpoint has `{n}` in its place"),
                })
            }
            Some((_, s)) if s != shape => {
                return Err(Error::ParamMismatch {
                    name: name.to_string(),
                    detail: format!("shape {s} in checkpoint, {shape} in model"),
                })
            }
            _ => {}
        }
    }
    if let Some((n, _)) = got.get(expected.len()) {
        return Err(Error::ParamMismatch {
            name: n.to_string(),
            detail: "not present in the model".into(),
        });
    }
    Ok(())
}

pub(super) fn check_compatible<T: Real>(model: &ParamStore<T>, other: &ParamStore<T>) -> Result<()> {
    let a: Vec<_> = model.iter().map(|(_, p)| (p.name(), p.shape())).collect();
    let b: Vec<_> = other.iter().map(|(_, p)| (p.name(), p.shape())).collect();
    compare(&a, &b)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mask: Vec<bool>) -> Hinet<f32> {
        Hinet::build(HinetConfig { hin_mask: mask, ..HinetConfig::tiny(4) }, &mut RngState::new(5)).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let net = tiny(vec![true; 5]);
        let mut ck = Checkpoint::from_model(&net);
        ck.extra.push(("train.seed".into(), "7".into()));
        ck.optim = Some(OptimSnapshot {
            step: 42,
            moments: ck.params.iter().take(3).cloned().collect(),
        });
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.extra("train.seed"), Some("7"));
    }

    #[test]
    fn distinct_errors() {
        let bytes = Checkpoint::from_model(&tiny(vec![true; 5])).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, "m"), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad, "m"), Err(Error::VersionMismatch { found: 9, .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "m"),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..4], "m"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn mismatched_model_is_rejected_by_name() {
        let ck = Checkpoint::from_model(&tiny(vec![true; 5]));
        let mut other = tiny(vec![false, true, true, true, true]);
        match ck.apply_to(&mut other) {
            Err(Error::ParamMismatch { name, .. }) => assert!(name.starts_with("s1.enc0.block"), "{name}"),
            other => panic!("{other:?}"),
        }
    }
}
