//! Checkpoint bytes survive a save/load cycle, and training resumed from a
//! mid-run checkpoint reproduces the uninterrupted log.

use hinet::model::{load_checkpoint, save_checkpoint};
use hinet::train::{TrainConfig, Trainer};
use hinet::HinetConfig;

fn main() -> hinet::Result<()> {
    let cfg = TrainConfig {
        steps: 12,
        batch: 2,
        log_every: 2,
        val_every: 4,
        ..TrainConfig::default()
    };
    let model = HinetConfig::tiny(4);

    let mut full = Vec::new();
    Trainer::new(model.clone(), cfg.clone())?.run(u64::MAX, &mut full, |_: &Trainer| Ok(()))?;

    let dir = std::env::temp_dir().join("hinet_checkpoint_roundtrip");
    std::fs::create_dir_all(&dir).expect("temporary directory");
    let path = dir.join("step6.bin");
    let mut log = Vec::new();
    let mut first = Trainer::new(model, cfg)?;
    first.run(6, &mut log, |_: &Trainer| Ok(()))?;
    save_checkpoint(&first.checkpoint(), &path)?;

    let ckpt = load_checkpoint(&path)?;
    println!("bytes identical after reload: {}", ckpt.to_bytes() == first.checkpoint().to_bytes());
    let mut resumed = Trainer::resume(&ckpt)?;
    resumed.run(u64::MAX, &mut log, |_: &Trainer| Ok(()))?;
    print!("{}", String::from_utf8_lossy(&log));
    println!("resumed log identical: {}", log == full);
    Ok(())
}
