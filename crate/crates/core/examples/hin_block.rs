//! One HIN block on a random 2×8×8×8 batch: the normalized half has zero
//! mean and unit variance per channel, the other half passes through.

use hinet::blocks::HinBlock;
use hinet::ops::{NormKind, ParamBuilder, NORM_EPS};
use hinet::{ParamStore, RngState, Shape4, Tape, Tensor};

fn plane_stats(t: &Tensor, n: usize, c: usize) -> (f64, f64) {
    let s = t.shape();
    let vals: Vec<f64> = (0..s.h * s.w).map(|i| t.at(n, c, i / s.w, i % s.w) as f64).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    (mean, var)
}

fn main() -> hinet::Result<()> {
    let mut rng = RngState::new(0);
    let mut store = ParamStore::<f32>::new();
    let block = HinBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), 8, 8, true, NormKind::None, NORM_EPS)?;

    let x = Tensor::randn(Shape4::new(2, 8, 8, 8)?, &mut rng, 0.0, 1.0)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let trace = block.forward_traced(&mut tape, &store, xv)?;
    let (mid, norm) = (tape.value(trace.f_mid), tape.value(trace.f_norm));

    println!("output {}", tape.shape(trace.out));
    for c in 0..8 {
        let (m, v) = plane_stats(norm, 0, c);
        let same = (0..2).all(|n| {
            mid.slice_batch(n..n + 1).unwrap().slice_channels(c..c + 1).unwrap()
                == norm.slice_batch(n..n + 1).unwrap().slice_channels(c..c + 1).unwrap()
        });
        let role = if c < 4 { "normalized " } else { "passthrough" };
        println!("channel {c} {role} mean={m:+.2e} var={v:.6} identical_to_f_mid={same}");
    }
    Ok(())
}
