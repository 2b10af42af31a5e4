//! Central-difference gradient checking.

use crate::error::Result;
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

use super::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation, scaled by `max(1, |x_i|)` per coordinate.
    pub eps: f64,
    /// Largest acceptable relative error.
    pub threshold: f64,
    /// Check at most this many coordinates per input (chosen at random).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl GradCheckOptions {
    /// Defaults for the element type: `eps = 1e-3, threshold = 1e-3` in
    /// 32-bit and `eps = 1e-5, threshold = 1e-6` in 64-bit.
    pub fn for_precision<T: Real>() -> Self {
        let (eps, threshold) = if T::BITS == 32 { (1e-3, 1e-3) } else { (1e-5, 1e-6) };
        GradCheckOptions {
            eps,
            threshold,
            max_coords: None,
            seed: 0,
        }
    }

    pub fn max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }
}

/// A coordinate whose perturbed evaluation was not finite.
#[derive(Clone, Debug, PartialEq)]
pub struct GradFailure {
    pub input: usize,
    pub coord: usize,
    pub plus: f64,
    pub minus: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub non_finite: Vec<GradFailure>,
    /// `(input, coordinate)` pairs whose perturbation crossed an activation
    /// kink; they are left out of `max_rel_error` and the point should be
    /// resampled.
    pub kink_crossings: Vec<(usize, usize)>,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_empty() && self.kink_crossings.is_empty() && self.max_rel_error < self.threshold
    }
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks the gradient of the scalar function `f` at `x` with the default
/// threshold for `T` and the given perturbation.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        eps,
        ..GradCheckOptions::for_precision::<T>()
    };
    grad_check_inputs(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), &opts)
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`.
pub fn grad_check_inputs<T, F>(f: F, inputs: &[Tensor<T>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let (analytic, base) = analytic_gradients(&f, inputs)?;
    let limits = vec![opts.max_coords; inputs.len()];
    central_differences(&analytic, &base, inputs, &limits, false, opts, |v| evaluate(&f, v))
}

/// Checks the 32-bit backward pass of `f` against central differences of
/// `reference`, the same function evaluated in 64-bit arithmetic at the same
/// point. This keeps 32-bit rounding out of the numeric side.
pub fn grad_check_mixed<F, R>(f: F, reference: R, inputs: &[Tensor<f32>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f32>, &[Var]) -> Result<Var>,
    R: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (analytic, base) = analytic_gradients(&f, inputs)?;
    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let limits = vec![opts.max_coords; inputs.len()];
    central_differences(&analytic, &base, &wide, &limits, false, opts, |v| evaluate(&reference, v))
}

fn evaluate<T, F>(f: &F, values: &[Tensor<T>]) -> Result<(f64, Vec<bool>)>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item()?.f64(), tape.kink_signature()))
}

fn analytic_gradients<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<(Vec<Tensor<f64>>, Vec<bool>)>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.gradients(out)?;
    let all = inputs
        .iter()
        .zip(&vars)
        .map(|(x, v)| grads.get(*v).map(|g| g.cast()).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    Ok((all, tape.kink_signature()))
}

/// Compares `analytic` against central differences of `eval`, which returns
/// the scalar and the kink signature of its tape. A perturbed evaluation whose
/// signature differs from `base`, the signature of the analytic pass, counts
/// as a kink crossing. `limits[i]` caps the number of coordinates checked in
/// `inputs[i]`. With `stop_at_kink` the scan ends at the first crossing.
pub(crate) fn central_differences<E: Real>(
    analytic: &[Tensor<f64>],
    base: &[bool],
    inputs: &[Tensor<E>],
    limits: &[Option<usize>],
    stop_at_kink: bool,
    opts: &GradCheckOptions,
    eval: impl Fn(&[Tensor<E>]) -> Result<(f64, Vec<bool>)>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        non_finite: Vec::new(),
        kink_crossings: Vec::new(),
        threshold: opts.threshold,
    };
    let mut rng = RngState::new(opts.seed);
    let mut work: Vec<Tensor<E>> = inputs.to_vec();

    for (i, input) in inputs.iter().enumerate() {
        for coord in coordinates(input.numel(), limits[i], &mut rng) {
            let x0 = input.data()[coord];
            let h = E::of(opts.eps * x0.f64().abs().max(1.0));
            let (xp, xm) = (x0 + h, x0 - h);

            work[i].data_mut()[coord] = xp;
            let (plus, sig_p) = eval(&work)?;
            work[i].data_mut()[coord] = xm;
            let (minus, sig_m) = eval(&work)?;
            work[i].data_mut()[coord] = x0;

            report.checked += 1;
            if !plus.is_finite() || !minus.is_finite() {
                report.non_finite.push(GradFailure { input: i, coord, plus, minus });
                continue;
            }
            if sig_p != base || sig_m != base {
                report.kink_crossings.push((i, coord));
                if stop_at_kink {
                    return Ok(report);
                }
                continue;
            }
            // Divide by the step actually taken after rounding.
            let numeric = (plus - minus) / (xp.f64() - xm.f64());
            let a = analytic[i].data()[coord];
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((i, coord, a, numeric));
            }
        }
    }
    Ok(report)
}

fn coordinates(numel: usize, max: Option<usize>, rng: &mut RngState) -> Vec<usize> {
    match max {
        Some(m) if m < numel => {
            // partial Fisher-Yates
            let mut idx: Vec<usize> = (0..numel).collect();
            for k in 0..m {
                let j = k + rng.below(numel - k);
                idx.swap(k, j);
            }
            let mut chosen = idx[..m].to_vec();
            chosen.sort_unstable();
            chosen
        }
        _ => (0..numel).collect(),
    }
}
