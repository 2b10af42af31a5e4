//! Trains a base-width-8 HINet on Gaussian denoising (σ = 25/255) and
//! reports the held-out PSNR gain over the noisy input.
//!
//! `cargo run --release --example train_denoise -- [steps]`

use std::io::stdout;
use std::time::Instant;

use hinet::train::{TrainConfig, Trainer};
use hinet::HinetConfig;

fn main() -> hinet::Result<()> {
    let steps = std::env::args().nth(1).map_or(Ok(2000), |s| s.parse()).expect("steps must be an integer");
    let cfg = TrainConfig {
        steps,
        log_every: 100,
        val_every: 500,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(HinetConfig::tiny(8), cfg)?;
    let input = trainer.input_psnr()?;
    println!("noisy input psnr {input:.4} dB");

    let start = Instant::now();
    trainer.run(steps, &mut stdout(), |_: &Trainer| Ok(()))?;
    let val = trainer.validate()?;
    println!("restored psnr {val:.4} dB, gain {:+.4} dB, {:.0} s", val - input, start.elapsed().as_secs_f64());
    Ok(())
}
