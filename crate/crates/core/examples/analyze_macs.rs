//! Analytic cost of HINet at several widths and input sizes.

use hinet::model::{count_macs, count_params, inventory};
use hinet::{HinetConfig, Shape4};

fn main() -> hinet::Result<()> {
    let input = Shape4::new(1, 3, 256, 256)?;
    println!("{:>6} {:>12} {:>12}", "scale", "params (M)", "MACs (G)");
    for s in [0.25, 0.5, 0.75, 1.0] {
        let cfg = HinetConfig::hinet(s);
        println!(
            "{s:>6} {:>12.3} {:>12.2}",
            count_params(&cfg)? as f64 / 1e6,
            count_macs(&cfg, input)? as f64 / 1e9
        );
    }

    let full = HinetConfig::hinet(1.0);
    let half = count_macs(&HinetConfig::hinet(0.5), input)? as f64 / count_macs(&full, input)? as f64;
    println!("\ns=0.5 / s=1 MACs ratio: {half:.4}");
    for side in [64, 128, 256, 512] {
        let m = count_macs(&full, Shape4::new(1, 3, side, side)?)?;
        println!("{side}x{side}: {:.2} G", m as f64 / 1e9);
    }

    let inv = inventory(&full, input)?;
    println!("\nconvs={} transposed={} hin_blocks={} res_blocks={}", inv.convs, inv.transposed_convs, inv.hin_blocks, inv.res_blocks);
    for row in inv.levels {
        println!("level {}: {} channels at {}x{}", row.level, row.channels, row.height, row.width);
    }
    Ok(())
}
