//! Restores a procedural test image with plain inference, dihedral TTA
//! and a three-model ensemble, writing PNGs to a directory (default: a
//! fresh temporary one).

use hinet::cli::restore_ensemble;
use hinet::imageio::save_png;
use hinet::train::{procedural_image, psnr, Degradation, PSNR_CAP};
use hinet::{Hinet, HinetConfig, RngState};

fn main() -> hinet::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("hinet_infer_tta"));
    std::fs::create_dir_all(&out).expect("output directory");

    let mut rng = RngState::new(7);
    let clean = procedural_image(48, &mut rng)?.crop(40, 44)?;
    let noisy = Degradation::GaussianNoise(0.1).apply(&clean, &mut rng)?;
    let models: Vec<Hinet> = (0..3)
        .map(|k| Hinet::build(HinetConfig::tiny(4), &mut RngState::new(k)))
        .collect::<hinet::Result<_>>()?;

    save_png(&noisy, &out.join("noisy.png"))?;
    for (name, members, tta) in [("plain", 1, false), ("tta", 1, true), ("ensemble_tta", 3, true)] {
        let (y, padded) = restore_ensemble(&models[..members], &noisy, tta)?;
        save_png(&y, &out.join(format!("{name}.png")))?;
        println!("{name:<13} psnr={:.3} dB padded={padded}", psnr(&y, &clean, 1.0, PSNR_CAP)?);
    }

    let mut zero = models[0].clone();
    zero.params.zero_values();
    let (plain, _) = restore_ensemble(std::slice::from_ref(&zero), &noisy, false)?;
    let (tta, _) = restore_ensemble(std::slice::from_ref(&zero), &noisy, true)?;
    println!("zero model: identity={} tta_equals_plain={}", plain == noisy.clamp(0.0, 1.0), tta == plain);
    println!("wrote {}", out.display());
    Ok(())
}
