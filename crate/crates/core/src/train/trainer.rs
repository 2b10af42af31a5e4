use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::imageio::{list_pngs, load_png};
use crate::model::{Checkpoint, Hinet, HinetConfig};
use crate::rng::RngState;
use crate::tensor::Tensor;

use super::data::{augment, AugmentSpec, Degradation, SynthDataset};
use super::metrics::{mean_psnr, psnr_loss};
use super::optim::{Adam, LrSchedule};

// Stream keys for the seed-derived generators; per-step streams use the
// step index itself.
const INIT_STREAM: u64 = u64::MAX - 1;
const DATA_STREAM: u64 = u64::MAX - 2;
const VAL_STREAM: u64 = u64::MAX - 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub patch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub degradation: Degradation,
    /// Procedural clean images to crop training patches from.
    pub base_images: usize,
    /// Directory of clean PNGs used instead of procedural images; the last
    /// fifth (at least one) of them in name order is held out for validation.
    pub clean_dir: Option<PathBuf>,
    pub image_size: usize,
    pub val_images: usize,
    pub val_every: u64,
    pub log_every: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub augment: AugmentSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 8,
            patch: 32,
            lr_start: 2e-4,
            lr_end: 1e-7,
            seed: 0,
            degradation: Degradation::GaussianNoise(25.0 / 255.0),
            base_images: 32,
            clean_dir: None,
            image_size: 64,
            val_images: 16,
            val_every: 200,
            log_every: 50,
            checkpoint_every: 0,
            augment: AugmentSpec::default(),
        }
    }
}

pub const TRAIN_KEYS: [&str; 17] = [
    "steps",
    "batch",
    "patch",
    "lr_start",
    "lr_end",
    "seed",
    "degradation",
    "base_images",
    "clean_dir",
    "image_size",
    "val_images",
    "val_every",
    "log_every",
    "checkpoint_every",
    "hflip",
    "vflip",
    "rot90",
];

fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr_start, self.lr_end, self.steps)
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "steps" => self.steps.to_string(),
            "batch" => self.batch.to_string(),
            "patch" => self.patch.to_string(),
            "lr_start" => self.lr_start.to_string(),
            "lr_end" => self.lr_end.to_string(),
            "seed" => self.seed.to_string(),
            "degradation" => self.degradation.to_string(),
            "base_images" => self.base_images.to_string(),
            "clean_dir" => self.clean_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            "image_size" => self.image_size.to_string(),
            "val_images" => self.val_images.to_string(),
            "val_every" => self.val_every.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "hflip" => self.augment.hflip.to_string(),
            "vflip" => self.augment.vflip.to_string(),
            "rot90" => self.augment.rot90.to_string(),
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "steps" => self.steps = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "patch" => self.patch = num(key, v)?,
            "lr_start" => self.lr_start = num(key, v)?,
            "lr_end" => self.lr_end = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "degradation" => self.degradation = v.parse()?,
            "base_images" => self.base_images = num(key, v)?,
            "clean_dir" => self.clean_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "image_size" => self.image_size = num(key, v)?,
            "val_images" => self.val_images = num(key, v)?,
            "val_every" => self.val_every = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "hflip" => self.augment.hflip = flag(key, v)?,
            "vflip" => self.augment.vflip = flag(key, v)?,
            "rot90" => self.augment.rot90 = flag(key, v)?,
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch == 0 || self.val_images == 0 || self.base_images == 0 {
            return bad("batch, val_images and base_images must be positive");
        }
        if self.patch == 0 || (self.clean_dir.is_none() && self.patch > self.image_size) {
            return bad("patch must be between 1 and image_size");
        }
        if self.log_every == 0 || self.val_every == 0 {
            return bad("log_every and val_every must be positive");
        }
        if !(self.lr_start >= self.lr_end && self.lr_end >= 0.0) {
            return bad("learning rates must satisfy lr_start >= lr_end >= 0");
        }
        Ok(())
    }
}

/// Training state: model, optimizer, data and the step counter.
pub struct Trainer {
    pub model: Hinet<f32>,
    pub adam: Adam<f32>,
    pub config: TrainConfig,
    data: SynthDataset,
    val: Batch,
    step: u64,
}

/// Degraded and clean images, stacked along the batch axis.
type Batch = (Tensor<f32>, Tensor<f32>);

fn directory_split(dir: &Path) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> {
    let files = list_pngs(dir)?;
    if files.len() < 2 {
        return Err(Error::Config(format!("clean_dir {} needs at least two PNG files", dir.display())));
    }
    let mut images = files.iter().map(|p| load_png(p, 3)).collect::<Result<Vec<_>>>()?;
    let held = (files.len() / 5).max(1);
    let val = images.split_off(files.len() - held);
    Ok((images, val))
}

fn datasets(cfg: &TrainConfig) -> Result<(SynthDataset, Batch)> {
    let root = RngState::new(cfg.seed);
    let mut val_rng = root.derive(VAL_STREAM);
    let (data, held_out) = match &cfg.clean_dir {
        Some(dir) => {
            let (train, val) = directory_split(dir)?;
            (
                SynthDataset::new(cfg.degradation, train, cfg.patch)?,
                SynthDataset::new(cfg.degradation, val, cfg.patch)?,
            )
        }
        None => {
            let mut rng = root.derive(DATA_STREAM);
            let data = SynthDataset::procedural(cfg.degradation, cfg.base_images, cfg.image_size, cfg.patch, &mut rng)?;
            let held_out =
                SynthDataset::procedural(cfg.degradation, cfg.val_images, cfg.image_size, cfg.patch, &mut val_rng)?;
            (data, held_out)
        }
    };
    let val = held_out.batch(cfg.val_images, &mut val_rng)?;
    Ok((data, val))
}

impl Trainer {
    pub fn new(model_cfg: HinetConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let d = model_cfg.size_divisor();
        if !cfg.patch.is_multiple_of(d) {
            return Err(Error::Config(format!("patch {} must be a multiple of {d}", cfg.patch)));
        }
        let model = Hinet::build(model_cfg, &mut RngState::new(cfg.seed).derive(INIT_STREAM))?;
        let adam = Adam::new(&model.params);
        let (data, val) = datasets(&cfg)?;
        Ok(Trainer {
            model,
            adam,
            config: cfg,
            data,
            val,
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for key in TRAIN_KEYS {
            let v = ckpt
                .extra(&format!("train.{key}"))
                .ok_or_else(|| Error::Config(format!("checkpoint lacks training key `{key}`")))?;
            cfg.set(key, v)?;
        }
        let mut trainer = Trainer::new(ckpt.config.clone(), cfg)?;
        ckpt.apply_to(&mut trainer.model)?;
        let snap = ckpt
            .optim
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        trainer.adam = Adam::restore(&trainer.model.params, snap)?;
        trainer.step = snap.step;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        for key in TRAIN_KEYS {
            ck.extra.push((format!("train.{key}"), self.config.get(key).expect("known key")));
        }
        ck.optim = Some(self.adam.snapshot(&self.model.params));
        ck
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn dataset(&self) -> &SynthDataset {
        &self.data
    }

    /// Samples, augments, and takes one optimizer step. Returns the loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let mut rng = RngState::new(self.config.seed).derive(self.step);
        let mut deg = Vec::with_capacity(self.config.batch);
        let mut clean = Vec::with_capacity(self.config.batch);
        for _ in 0..self.config.batch {
            let s = augment(&self.data.sample(&mut rng)?, &self.config.augment, &mut rng)?;
            deg.push(s.degraded);
            clean.push(s.clean);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::concat_batch(&deg)?);
        let y = tape.leaf(Tensor::concat_batch(&clean)?);
        let out = self.model.forward(&mut tape, x)?;
        let loss_var = psnr_loss(&mut tape, &out.images, y)?;
        let loss = tape.value(loss_var).item()? as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step + 1, value: loss });
        }
        self.model.params.zero_grad();
        tape.backward(loss_var, &mut self.model.params)?;
        self.model.params.commit_state(&tape)?;
        let lr = self.config.schedule().lr(self.step);
        self.adam.apply(&mut self.model.params, lr);
        self.step += 1;
        Ok(loss)
    }

    /// Mean PSNR of the clipped restorations on the held-out batch.
    pub fn validate(&self) -> Result<f64> {
        let (deg, clean) = &self.val;
        let (out, _) = self.model.restore(deg)?;
        mean_psnr(&out.clamp(0.0, 1.0), clean)
    }

    /// Mean PSNR of the degraded held-out inputs.
    pub fn input_psnr(&self) -> Result<f64> {
        mean_psnr(&self.val.0, &self.val.1)
    }

    pub fn validation_set(&self) -> &(Tensor<f32>, Tensor<f32>) {
        &self.val
    }

    /// Trains until `until` (capped at the configured total), writing one log
    /// record per interval and calling `on_checkpoint` at checkpoint steps.
    pub fn run(
        &mut self,
        until: u64,
        log: &mut dyn Write,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        let end = until.min(self.config.steps);
        while self.step < end {
            let lr = self.config.schedule().lr(self.step);
            let loss = self.train_step()?;
            let s = self.step;
            let last = s == self.config.steps;
            if s.is_multiple_of(self.config.log_every) || last {
                let val = if s.is_multiple_of(self.config.val_every) || last {
                    Some(self.validate()?)
                } else {
                    None
                };
                writeln!(log, "{}", log_line(s, lr, loss, val)).map_err(|e| Error::io("writing training log", e))?;
            }
            if self.config.checkpoint_every > 0 && s.is_multiple_of(self.config.checkpoint_every) && !last {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// `step=<n> lr=<lr> loss=<loss> val_psnr=<dB or ->`.
pub fn log_line(step: u64, lr: f64, loss: f64, val_psnr: Option<f64>) -> String {
    let val = val_psnr.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    format!("step={step} lr={lr:.6e} loss={loss:.6} val_psnr={val}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (HinetConfig, TrainConfig) {
        let cfg = TrainConfig {
            steps: 6,
            batch: 2,
            patch: 16,
            image_size: 24,
            base_images: 3,
            val_images: 2,
            val_every: 3,
            log_every: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        (HinetConfig::tiny(2), cfg)
    }

    fn run_log(trainer: &mut Trainer, until: u64) -> String {
        let mut log = Vec::new();
        trainer.run(until, &mut log, |_| Ok(())).unwrap();
        String::from_utf8(log).unwrap()
    }

    #[test]
    fn logs_are_deterministic_and_resumable() {
        let (m, t) = small();
        let full = run_log(&mut Trainer::new(m.clone(), t.clone()).unwrap(), u64::MAX);
        assert_eq!(full.lines().count(), 3);
        assert!(full.lines().last().unwrap().starts_with("step=6 "));
        assert_eq!(full, run_log(&mut Trainer::new(m.clone(), t.clone()).unwrap(), u64::MAX));

        let mut first = Trainer::new(m.clone(), t.clone()).unwrap();
        let head = run_log(&mut first, 3);
        let bytes = first.checkpoint().to_bytes();
        let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes, "mem").unwrap()).unwrap();
        assert_eq!(resumed.step(), 3);
        let tail = run_log(&mut resumed, u64::MAX);
        assert_eq!(format!("{head}{tail}"), full);

        let other = run_log(&mut Trainer::new(m, TrainConfig { seed: 12, ..t }).unwrap(), u64::MAX);
        assert_ne!(other, full);
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let (m, t) = small();
        let mut trainer = Trainer::new(m.clone(), TrainConfig { steps: 0, ..t.clone() }).unwrap();
        assert_eq!(run_log(&mut trainer, u64::MAX), "");
        let fresh = Trainer::new(m, t).unwrap();
        assert_eq!(trainer.checkpoint().params, fresh.checkpoint().params);
    }

    #[test]
    fn clean_directory_replaces_procedural_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngState::new(5);
        for k in 0..5 {
            let img = crate::train::procedural_image(20, &mut rng).unwrap();
            crate::imageio::save_png(&img, &dir.path().join(format!("{k}.png"))).unwrap();
        }
        let (m, mut t) = small();
        t.set("clean_dir", &dir.path().display().to_string()).unwrap();
        t.set("image_size", "8").unwrap();
        let mut trainer = Trainer::new(m, t.clone()).unwrap();
        assert_eq!(trainer.dataset().bases.len(), 4);
        assert_eq!(run_log(&mut trainer, 2).lines().count(), 1);
        assert_eq!(t.get("clean_dir").unwrap(), dir.path().display().to_string());

        let lone = tempfile::tempdir().unwrap();
        t.clean_dir = Some(lone.path().to_path_buf());
        assert!(Trainer::new(HinetConfig::tiny(2), t).is_err());
    }

    #[test]
    fn log_format() {
        assert_eq!(log_line(5, 2e-4, -40.5, None), "step=5 lr=2.000000e-4 loss=-40.500000 val_psnr=-");
        assert_eq!(log_line(5, 2e-4, -40.5, Some(27.25)), "step=5 lr=2.000000e-4 loss=-40.500000 val_psnr=27.2500");
    }
}
