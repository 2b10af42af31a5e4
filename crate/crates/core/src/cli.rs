//! Command-line front end: `analyze`, `train`, `infer` and `gradcheck`.
//!
//! Settings resolve in order: built-in defaults, `--config` file, flags,
//! then positional `key=value` overrides. Keys are the model keys
//! ([`CONFIG_KEYS`]) and training keys ([`TRAIN_KEYS`]); anything else is
//! an error.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, Precision};
use crate::imageio::{list_pngs, load_png, save_png};
use crate::model::{
    count_macs, count_params, inventory, load_checkpoint, save_checkpoint, Checkpoint, Hinet, HinetConfig, CONFIG_KEYS,
};
use crate::tensor::{Dihedral, Shape4, Tensor};
use crate::train::{TrainConfig, Trainer, TRAIN_KEYS};

#[derive(Parser, Debug)]
#[command(name = "hinet", version, about = "HINet image restoration: analyze, train, infer, gradcheck")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Settings {
    /// Flat `key = value` file (`#` starts a comment).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Channel-width multiplier.
    #[arg(long)]
    pub scale: Option<f64>,
    /// `key=value` overrides, applied last.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parameter count, MACs, per-level widths and block inventory.
    Analyze {
        #[command(flatten)]
        settings: Settings,
        /// Input shape `NxCxHxW`.
        #[arg(long, default_value = "1x3x256x256")]
        input: Shape4,
    },
    /// Train on a synthetic restoration task.
    Train {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out_dir: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step (the schedule still spans `steps`).
        #[arg(long)]
        until: Option<u64>,
    },
    /// Restore PNG images.
    Infer {
        #[command(flatten)]
        settings: Settings,
        /// Image files or directories of PNGs.
        #[arg(long, value_delimiter = ',', required = true)]
        input: Vec<PathBuf>,
        /// Checkpoints whose outputs are averaged.
        #[arg(long, alias = "checkpoint", value_delimiter = ',', required = true)]
        ensemble: Vec<PathBuf>,
        /// Average over the eight flips and rotations.
        #[arg(long)]
        tta: bool,
        #[arg(long, default_value = "restored")]
        out_dir: PathBuf,
    },
    /// Finite-difference check of every operator and block.
    Gradcheck {
        /// `f32`, `f64` or `both`.
        #[arg(long, default_value = "both")]
        precision: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only cases whose name contains this.
        #[arg(long)]
        filter: Option<String>,
    },
}

/// Model and training configuration plus the keys set explicitly.
#[derive(Clone, Debug, Default)]
pub struct Resolved {
    pub model: HinetConfig,
    pub train: TrainConfig,
    pub explicit: Vec<String>,
}

impl Resolved {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if CONFIG_KEYS.contains(&key) {
            self.model.set(key, value)?;
        } else if TRAIN_KEYS.contains(&key) {
            self.train.set(key, value)?;
        } else {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        if !self.explicit.iter().any(|k| k == key) {
            self.explicit.push(key.to_string());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        if CONFIG_KEYS.contains(&key) {
            self.model.get(key)
        } else {
            self.train.get(key)
        }
    }

    /// Explicit model keys must agree with `config` (e.g. a checkpoint's).
    fn check_model(&self, config: &HinetConfig, what: &str) -> Result<()> {
        for key in self.explicit.iter().filter(|k| CONFIG_KEYS.contains(&k.as_str())) {
            let (mine, theirs) = (self.model.get(key)?, config.get(key)?);
            if mine != theirs {
                return Err(Error::Config(format!("{key} = {mine} but {what} has {theirs}")));
            }
        }
        Ok(())
    }
}

fn parse_pair(s: &str) -> Result<(&str, &str)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected `key=value`, got `{s}`")))?;
    Ok((k.trim(), v.trim()))
}

impl Settings {
    pub fn resolve(&self, seed: Option<u64>) -> Result<Resolved> {
        let mut r = Resolved::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = parse_pair(line)?;
                r.set(k, v)
                    .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            }
        }
        if let Some(s) = self.scale {
            r.set("scale", &s.to_string())?;
        }
        if let Some(s) = seed {
            r.set("seed", &s.to_string())?;
        }
        for o in &self.overrides {
            let (k, v) = parse_pair(o)?;
            r.set(k, v)?;
        }
        r.model.validate()?;
        Ok(r)
    }
}

/// Human-readable report followed by a `[kv]` section of `key=value` lines.
pub fn analyze_report(cfg: &HinetConfig, input: Shape4) -> Result<String> {
    let macs = count_macs(cfg, input)?;
    let params = count_params(cfg)?;
    let inv = inventory(cfg, input)?;
    let mut s = String::new();
    let _ = writeln!(s, "model: {} stage(s), {} levels, scale {}, base width {}", cfg.stages, cfg.levels, cfg.scale, cfg.base_width);
    let _ = writeln!(s, "input: {input}");
    let _ = writeln!(s, "params: {params} ({:.3} M)", params as f64 / 1e6);
    let _ = writeln!(s, "MACs: {:.2} G ({macs})", macs as f64 / 1e9);
    let _ = writeln!(s, "\nlevel  channels  height  width  block");
    for row in &inv.levels {
        let block = if row.hin { "hin".to_string() } else { cfg.norm_kind.to_string() };
        let _ = writeln!(s, "{:>5}  {:>8}  {:>6}  {:>5}  {block}", row.level, row.channels, row.height, row.width);
    }
    let counts = [
        ("hin_blocks", inv.hin_blocks),
        ("other_encoder_blocks", inv.other_encoder_blocks),
        ("res_blocks", inv.res_blocks),
        ("decoder_hin_blocks", inv.decoder_hin_blocks),
        ("downsamples", inv.downsamples),
        ("upsamples", inv.upsamples),
        ("fuse_convs", inv.fuse_convs),
        ("sam", inv.sam),
        ("csff_pairs", inv.csff_pairs),
        ("convs", inv.convs),
        ("transposed_convs", inv.transposed_convs),
    ];
    let _ = writeln!(s, "\nblocks:");
    for (k, v) in counts {
        let _ = writeln!(s, "  {k:<22}{v}");
    }
    let _ = writeln!(s, "\n[kv]");
    let _ = writeln!(s, "input={input}");
    let _ = writeln!(s, "params={params}");
    let _ = writeln!(s, "macs={macs}");
    let widths: Vec<String> = cfg.widths().iter().map(usize::to_string).collect();
    let _ = writeln!(s, "widths={}", widths.join(","));
    for (k, v) in counts {
        let _ = writeln!(s, "{k}={v}");
    }
    for key in CONFIG_KEYS {
        let _ = writeln!(s, "config.{key}={}", cfg.get(key)?);
    }
    Ok(s)
}

/// Values of the `[kv]` section of an analyze report.
pub fn parse_kv(report: &str) -> Vec<(String, String)> {
    report
        .lines()
        .skip_while(|l| l.trim() != "[kv]")
        .skip(1)
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Mean restoration over the models and, with `tta`, the eight dihedral
/// transforms (each mapped back before averaging). Accumulates in f64.
/// The flag reports whether any forward pass needed padding.
pub fn restore_ensemble(models: &[Hinet<f32>], x: &Tensor<f32>, tta: bool) -> Result<(Tensor<f32>, bool)> {
    if models.is_empty() {
        return Err(Error::arg("restore_ensemble", "no models"));
    }
    let transforms: Vec<Dihedral> = if tta { Dihedral::all().collect() } else { vec![Dihedral::IDENTITY] };
    let mut acc = vec![0.0f64; x.numel()];
    let mut padded = false;
    for m in models {
        for d in &transforms {
            let (y, p) = m.restore(&d.apply(x))?;
            padded |= p;
            for (a, v) in acc.iter_mut().zip(d.inverse().apply(&y).data()) {
                *a += *v as f64;
            }
        }
    }
    let k = (models.len() * transforms.len()) as f64;
    let mean = acc.into_iter().map(|a| (a / k) as f32).collect();
    Ok((Tensor::from_vec(x.shape(), mean)?.clamp(0.0, 1.0), padded))
}

/// Writes to a file and to another sink.
struct Tee<'a> {
    file: File,
    other: &'a mut dyn Write,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.file.write_all(buf)?;
        self.other.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.flush()?;
        self.other.flush()
    }
}

fn log_step(line: &str) -> Option<u64> {
    line.strip_prefix("step=")?.split(' ').next()?.parse().ok()
}

/// Drops log records past `step` so a resumed run appends cleanly.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let ctx = || format!("rewriting {}", path.display());
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(ctx(), e)),
    };
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(ctx(), e))?;
        if log_step(&line).is_some_and(|s| s <= step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(ctx(), e))
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.bin")
}

fn cmd_train(r: &Resolved, out_dir: &Path, resume: Option<&Path>, until: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)
                .map_err(|e| Error::Config(format!("cannot resume from {}: {e}", path.display())))?;
            let t = Trainer::resume(&ckpt)
                .map_err(|e| Error::Config(format!("cannot resume from {}: {e}", path.display())))?;
            r.check_model(&ckpt.config, "the checkpoint")?;
            for key in r.explicit.iter().filter(|k| TRAIN_KEYS.contains(&k.as_str())) {
                let (mine, theirs) = (r.get(key)?, t.config.get(key)?);
                if mine != theirs {
                    return Err(Error::Config(format!("{key} = {mine} but the checkpoint has {theirs}")));
                }
            }
            t
        }
        None => Trainer::new(r.model.clone(), r.train.clone())?,
    };
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("cannot create output directory {}", out_dir.display()), e))?;
    let log_path = out_dir.join("train.log");
    if resume.is_some() {
        truncate_log(&log_path, trainer.step())?;
    }
    let file = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(format!("cannot write to output directory {}", out_dir.display()), e))?;
    let mut log = Tee { file, other: out };
    let until = until.unwrap_or(trainer.config.steps);
    trainer.run(until, &mut log, |t: &Trainer| {
        save_checkpoint(&t.checkpoint(), &out_dir.join(checkpoint_name(t.step())))
    })?;
    save_checkpoint(&trainer.checkpoint(), &out_dir.join("last.bin"))?;
    let (input, val) = (trainer.input_psnr()?, trainer.validate()?);
    writeln!(
        log.other,
        "done step={} input_psnr={input:.4} val_psnr={val:.4} gain={:.4}",
        trainer.step(),
        val - input
    )
    .map_err(|e| Error::io("writing report", e))?;
    Ok(())
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(list_pngs(p)?);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

/// Restores every input; returns false if any file failed.
fn cmd_infer(
    r: &Resolved,
    inputs: &[PathBuf],
    ckpts: &[PathBuf],
    tta: bool,
    out_dir: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<bool> {
    let loaded: Vec<Checkpoint> = ckpts.iter().map(|p| load_checkpoint(p)).collect::<Result<_>>()?;
    let config = &loaded[0].config;
    for (p, c) in ckpts.iter().zip(&loaded).skip(1) {
        if c.config != *config {
            return Err(Error::Config(format!("{} has a different model config than {}", p.display(), ckpts[0].display())));
        }
    }
    r.check_model(config, "the checkpoint")?;
    let models: Vec<Hinet<f32>> = loaded.iter().map(Checkpoint::to_model).collect::<Result<_>>()?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("cannot create output directory {}", out_dir.display()), e))?;
    let mut ok = true;
    for path in expand_inputs(inputs)? {
        let dest = out_dir.join(path.file_name().unwrap_or(path.as_os_str()));
        let result = load_png(&path, config.img_channels).and_then(|x| {
            let (y, padded) = restore_ensemble(&models, &x, tta)?;
            save_png(&y, &dest)?;
            Ok((x.shape(), padded))
        });
        let line = match result {
            Ok((s, padded)) => writeln!(out, "ok {} -> {} {}x{} padded={padded}", path.display(), dest.display(), s.h, s.w),
            Err(e) => {
                ok = false;
                writeln!(err, "error {}: {e}", path.display())
            }
        };
        line.map_err(|e| Error::io("writing report", e))?;
    }
    Ok(ok)
}

fn cmd_gradcheck(precision: &str, seed: u64, filter: Option<&str>, out: &mut dyn Write) -> Result<bool> {
    let precisions = match precision {
        "both" | "all" => vec![Precision::Single, Precision::Double],
        p => vec![p.parse()?],
    };
    let mut ok = true;
    for p in precisions {
        let reports = run_suite(p, seed, filter)?;
        if reports.is_empty() {
            return Err(Error::Config(format!("no gradient-check case matches `{}`", filter.unwrap_or(""))));
        }
        let failed = reports.iter().filter(|r| !r.passed()).count();
        let w = |e| Error::io("writing report", e);
        for r in &reports {
            writeln!(out, "{r}").map_err(w)?;
        }
        writeln!(out, "{p}: {} passed, {failed} failed", reports.len() - failed).map_err(w)?;
        ok &= failed == 0;
    }
    Ok(ok)
}

/// Runs a parsed command. Exit code 0 iff everything requested succeeded,
/// 1 if a check or file failed, 2 on configuration or I/O errors.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Analyze { settings, input } => settings
            .resolve(None)
            .and_then(|r| analyze_report(&r.model, input))
            .and_then(|s| out.write_all(s.as_bytes()).map_err(|e| Error::io("writing report", e)))
            .map(|_| true),
        Command::Train {
            settings,
            seed,
            out_dir,
            resume,
            until,
        } => settings
            .resolve(seed)
            .and_then(|r| cmd_train(&r, &out_dir, resume.as_deref(), until, out))
            .map(|_| true),
        Command::Infer {
            settings,
            input,
            ensemble,
            tta,
            out_dir,
        } => settings
            .resolve(None)
            .and_then(|r| cmd_infer(&r, &input, &ensemble, tta, &out_dir, out, err)),
        Command::Gradcheck {
            precision,
            seed,
            filter,
        } => cmd_gradcheck(&precision, seed, filter.as_deref(), out),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

/// Parses `args` (program name first) and runs.
pub fn main_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, out, err),
        Err(e) => {
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(overrides: &[&str]) -> Settings {
        Settings {
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
            ..Settings::default()
        }
    }

    #[test]
    fn overrides_route_to_model_and_training() {
        let r = settings(&["base_width=8", "steps=10", "hflip=false"]).resolve(Some(4)).unwrap();
        assert_eq!(r.model.base_width, 8);
        assert_eq!(r.train.steps, 10);
        assert_eq!(r.train.seed, 4);
        assert!(!r.train.augment.hflip);
        assert_eq!(r.explicit, ["seed", "base_width", "steps", "hflip"]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = settings(&["base_widht=8"]).resolve(None).unwrap_err();
        assert!(e.to_string().contains("unknown key `base_widht`"));
        assert!(settings(&["steps"]).resolve(None).is_err());
    }

    #[test]
    fn config_file_then_flags_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        fs::write(&path, "# tiny\nbase_width = 8\nscale = 2 # doubled\nsteps = 5\n").unwrap();
        let s = Settings {
            config: Some(path.clone()),
            scale: Some(0.5),
            overrides: vec!["steps=7".into()],
        };
        let r = s.resolve(None).unwrap();
        assert_eq!((r.model.base_width, r.model.scale, r.train.steps), (8, 0.5, 7));
        fs::write(&path, "bogus = 1\n").unwrap();
        let e = s.resolve(None).unwrap_err().to_string();
        assert!(e.contains(":1:") && e.contains("bogus"), "{e}");
    }

    #[test]
    fn kv_section_parses() {
        let rep = analyze_report(&HinetConfig::tiny(8), Shape4::new(1, 3, 32, 32).unwrap()).unwrap();
        let kv = parse_kv(&rep);
        assert!(kv.iter().any(|(k, v)| k == "input" && v == "1x3x32x32"));
        assert!(kv.iter().any(|(k, _)| k == "macs"));
        assert!(kv.iter().any(|(k, v)| k == "config.base_width" && v == "8"));
    }

    #[test]
    fn log_truncation_keeps_earlier_steps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.log");
        fs::write(&p, "step=2 a\nstep=4 b\nstep=6 c\n").unwrap();
        truncate_log(&p, 4).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "step=2 a\nstep=4 b\n");
        truncate_log(&dir.path().join("missing.log"), 1).unwrap();
    }

    #[test]
    fn usage_errors_exit_with_two() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(main_with(["hinet", "analyze", "depth=3"], &mut o, &mut e), 2);
        assert!(String::from_utf8(e).unwrap().contains("unknown key"));
        let mut e = Vec::new();
        assert_eq!(main_with(["hinet", "frobnicate"], &mut o, &mut e), 2);
    }
}
