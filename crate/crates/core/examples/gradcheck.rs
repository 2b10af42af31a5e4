//! Runs the finite-difference suite. Optional arguments: precision
//! (`f32` or `f64`, default both) and a case-name filter.
//!
//! `cargo run --release --example gradcheck -- f64 norm`

use hinet::gradsuite::{run_suite, Precision};

fn main() -> hinet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let precisions = match args.first() {
        Some(p) => vec![p.parse::<Precision>()?],
        None => vec![Precision::Single, Precision::Double],
    };
    let filter = args.get(1).map(String::as_str);
    let mut failed = 0;
    for p in precisions {
        for report in run_suite(p, 0, filter)? {
            println!("{report}");
            failed += usize::from(!report.passed());
        }
    }
    println!("{failed} failing case(s)");
    Ok(())
}
