//! Every normalization variant and every HIN placement row: parameter
//! count and the loss of one training step on the same batch.

use hinet::model::{count_params, PLACEMENT_ROWS};
use hinet::ops::NormKind;
use hinet::train::{psnr_loss, Degradation, SynthDataset};
use hinet::{Hinet, HinetConfig, RngState, Tape};

fn step_loss(cfg: HinetConfig, batch: &(hinet::Tensor, hinet::Tensor)) -> hinet::Result<f64> {
    let mut net: Hinet = Hinet::build(cfg, &mut RngState::new(1))?;
    let mut tape = Tape::new();
    let x = tape.leaf(batch.0.clone());
    let y = tape.leaf(batch.1.clone());
    let out = net.forward(&mut tape, x)?;
    let loss = psnr_loss(&mut tape, &out.images, y)?;
    tape.backward(loss, &mut net.params)?;
    Ok(tape.value(loss).item()? as f64)
}

fn main() -> hinet::Result<()> {
    let mut rng = RngState::new(0);
    let data = SynthDataset::procedural(Degradation::GaussianNoise(25.0 / 255.0), 4, 48, 32, &mut rng)?;
    let batch = data.batch(2, &mut rng)?;
    let base = HinetConfig::tiny(8);

    println!("encoder norm");
    for kind in NormKind::all(2) {
        let cfg = base.clone().with_norm(kind);
        println!("  {:<24} params={:<7} loss={:.4}", kind.to_string(), count_params(&cfg)?, step_loss(cfg, &batch)?);
    }

    println!("HIN placement");
    for (row, (mask, dec)) in PLACEMENT_ROWS.iter().enumerate() {
        let cfg = base.clone().with_placement(row)?;
        let m: String = mask.iter().map(|&b| if b { 'x' } else { '.' }).collect();
        println!("  row {row:>2} {m} decoder={dec:<5} params={:<7} loss={:.4}", count_params(&cfg)?, step_loss(cfg, &batch)?);
    }
    Ok(())
}
