//! Seed-fixed finite-difference checks over every differentiable operator
//! and block, in either precision.
//!
//! Single-precision checks compare the `f32` backward pass against central
//! differences of the same function evaluated in `f64` at the same point;
//! double-precision checks are `f64` throughout. Inputs are resampled when a
//! perturbation crosses an activation kink; in deep cases where every draw
//! has some crossings, the crossing coordinates of the last draw are left
//! out and counted.
//!
//! Operator cases check the input and parameter gradients. Block and model
//! cases check the input gradients: some of their parameters (biases
//! feeding a normalization) have an exactly zero gradient, where the
//! relative error measures rounding only.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::gradcheck::central_differences;
use crate::autodiff::{GradCheckOptions, GradCheckReport, ParamId, ParamStore, Tape, Var};
use crate::blocks::{Csff, HinBlock, ResBlock, Sam};
use crate::error::{Error, Result};
use crate::model::{Hinet, HinetConfig};
use crate::ops::{ConvLayer, ConvSpec, NormKind, NormLayer, ParamBuilder, LEAKY_SLOPE, NORM_EPS};
use crate::rng::RngState;
use crate::tensor::{Real, Shape4, Tensor};
use crate::train::psnr_loss;

/// Every case, in suite order.
pub const CASES: &[&str] = &[
    "conv2d",
    "conv2d_down",
    "conv_transpose2d",
    "leaky_relu",
    "sigmoid",
    "concat",
    "norm:batch",
    "norm:layer",
    "norm:instance",
    "norm:group:2",
    "norm:instance_half",
    "norm:batch_then_instance_half",
    "hin_block",
    "res_block",
    "sam",
    "csff",
    "hinet_loss",
];

/// Inputs are redrawn at most this many times to get away from kinks.
pub const MAX_RESAMPLES: u64 = 16;

/// Largest share of checked coordinates that may be left out for crossing
/// a kink.
pub const MAX_KINK_SHARE: f64 = 0.1;

/// Parameter coordinates checked per tensor in block and model cases.
const PARAM_COORDS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    /// The threshold of the checked precision. The difference quotient is
    /// always formed in `f64`, so the step is the `f64` one.
    pub fn options(self) -> GradCheckOptions {
        let wide = GradCheckOptions::for_precision::<f64>();
        match self {
            Precision::Single => GradCheckOptions {
                threshold: GradCheckOptions::for_precision::<f32>().threshold,
                ..wide
            },
            Precision::Double => wide,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "f32",
            Precision::Double => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" | "single" => Ok(Precision::Single),
            "f64" | "64" | "double" => Ok(Precision::Double),
            _ => Err(Error::Config(format!("unknown precision `{s}` (expected f32 or f64)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: String,
    pub precision: Precision,
    pub report: GradCheckReport,
    /// Input draws rejected for crossing a kink.
    pub resamples: u64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        let r = &self.report;
        r.non_finite.is_empty()
            && r.max_rel_error < r.threshold
            && (r.kink_crossings.len() as f64) <= MAX_KINK_SHARE * r.checked as f64
    }
}

impl fmt::Display for CaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.report;
        write!(
            f,
            "{} {:<30} {} max_rel_err={:.3e} (< {:.0e}) coords={} resamples={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.precision,
            r.max_rel_error,
            r.threshold,
            r.checked,
            self.resamples
        )?;
        if !r.non_finite.is_empty() {
            write!(f, " non_finite={}", r.non_finite.len())?;
        }
        if !r.kink_crossings.is_empty() {
            write!(f, " kink_crossings={}", r.kink_crossings.len())?;
        }
        Ok(())
    }
}

enum Subject {
    /// `mean(r ⊙ conv(x))`.
    Conv(ConvLayer),
    LeakyRelu,
    Sigmoid,
    /// `mean(r ⊙ concat(lrelu(a), b))`.
    Concat,
    Norm(NormLayer),
    /// Mean output.
    Hin(HinBlock),
    Res(ResBlock),
    /// `mean(features) + mean(restored)`.
    Sam(Sam),
    /// Sum of the per-scale output means.
    Csff(Csff),
    /// Two-stage PSNR loss against a fixed target.
    Hinet(Box<Hinet<f32>>),
}

struct Fixture {
    subject: Subject,
    store: ParamStore<f32>,
    /// Trainable parameters under check (operator cases only).
    params: Vec<ParamId>,
    inputs: Vec<Tensor<f32>>,
    /// Cap on checked input coordinates per tensor.
    input_coords: Option<usize>,
    /// Projection weights or regression target, not differentiated.
    aux: Option<Tensor<f32>>,
}

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
    Shape4::new(n, c, h, w).expect("nonzero extents")
}

fn normal(s: Shape4, rng: &mut RngState) -> Tensor<f32> {
    Tensor::randn(s, rng, 0.0, 1.0).expect("unit std")
}

/// Builds the parameters of case `name` from `rng`, then draws its inputs
/// from `inputs_rng`.
fn fixture(name: &str, rng: &mut RngState, inputs_rng: &mut RngState) -> Result<Fixture> {
    let mut store = ParamStore::<f32>::new();
    let mut b = ParamBuilder::new(&mut store, rng);
    let proj = |s: Shape4, r: &mut RngState| Some(normal(s, r));
    let (subject, inputs, aux) = match name {
        "conv2d" => {
            let c = b.conv("conv", ConvSpec::conv3x3(3, 4))?;
            let x = normal(shape(2, 3, 6, 6), inputs_rng);
            (Subject::Conv(c), vec![x], proj(shape(2, 4, 6, 6), inputs_rng))
        }
        "conv2d_down" => {
            let c = b.conv("down", ConvSpec::down4x4(2, 4))?;
            let x = normal(shape(2, 2, 8, 8), inputs_rng);
            (Subject::Conv(c), vec![x], proj(shape(2, 4, 4, 4), inputs_rng))
        }
        "conv_transpose2d" => {
            let c = b.conv_transpose("up", ConvSpec::up2x2(4, 2))?;
            let x = normal(shape(2, 4, 3, 3), inputs_rng);
            (Subject::Conv(c), vec![x], proj(shape(2, 2, 6, 6), inputs_rng))
        }
        "leaky_relu" | "sigmoid" => {
            let x = normal(shape(2, 3, 4, 4), inputs_rng);
            let s = if name == "sigmoid" { Subject::Sigmoid } else { Subject::LeakyRelu };
            (s, vec![x], proj(shape(2, 3, 4, 4), inputs_rng))
        }
        "concat" => {
            let a = normal(shape(2, 2, 4, 4), inputs_rng);
            let c = normal(shape(2, 3, 4, 4), inputs_rng);
            (Subject::Concat, vec![a, c], proj(shape(2, 5, 4, 4), inputs_rng))
        }
        "hin_block" => {
            let blk = HinBlock::build(&mut b.scope("hin"), 8, 8, true, NormKind::None, NORM_EPS)?;
            (Subject::Hin(blk), vec![normal(shape(2, 8, 8, 8), inputs_rng)], None)
        }
        "res_block" => {
            let blk = ResBlock::build(&mut b.scope("res"), 8, true, NORM_EPS)?;
            (Subject::Res(blk), vec![normal(shape(2, 8, 8, 8), inputs_rng)], None)
        }
        "sam" => {
            let sam = Sam::build(&mut b.scope("sam"), 6, 3)?;
            let f = normal(shape(2, 6, 6, 6), inputs_rng);
            let x = Tensor::uniform(shape(2, 3, 6, 6), inputs_rng, 0.0, 1.0);
            (Subject::Sam(sam), vec![f, x], None)
        }
        "csff" => {
            let csff = Csff::build(&mut b.scope("csff"), &[4, 8])?;
            let e0 = normal(shape(1, 4, 8, 8), inputs_rng);
            let e1 = normal(shape(1, 8, 4, 4), inputs_rng);
            let d0 = normal(shape(1, 4, 8, 8), inputs_rng);
            let d1 = normal(shape(1, 8, 4, 4), inputs_rng);
            (Subject::Csff(csff), vec![e0, e1, d0, d1], None)
        }
        "hinet_loss" => {
            drop(b);
            let net = Hinet::<f32>::build(HinetConfig::tiny(2), rng)?;
            store = net.params.clone();
            // 32×32 keeps the deepest normalized planes at 2×2 pixels.
            let y = Tensor::uniform(shape(1, 3, 32, 32), inputs_rng, 0.1, 0.9);
            let noise = normal(y.shape(), inputs_rng).scale(0.1);
            let x = y.add(&noise)?;
            let fx = Fixture {
                params: Vec::new(),
                subject: Subject::Hinet(Box::new(net)),
                store,
                inputs: vec![x],
                input_coords: Some(512),
                aux: Some(y),
            };
            return Ok(fx);
        }
        other => match other.strip_prefix("norm:").map(str::parse::<NormKind>) {
            Some(Ok(kind)) if kind != NormKind::None => {
                let layer = NormLayer::build(&mut b.scope("norm"), kind, 4)?;
                let x = normal(shape(3, 4, 4, 4), inputs_rng).map(|v| 0.5 + 2.0 * v);
                (Subject::Norm(layer), vec![x], proj(shape(3, 4, 4, 4), inputs_rng))
            }
            _ => return Err(Error::Config(format!("unknown gradient-check case `{other}`"))),
        },
    };
    // Affine parameters start at (1, 0); move them off that point.
    let ids = trainable(&store);
    for &id in &ids {
        let p = store.get_mut(id);
        let jitter = Tensor::uniform(p.shape(), inputs_rng, -0.3, 0.3);
        let v = p.value().add(&jitter)?;
        p.set_value(v)?;
    }
    let operator = matches!(
        subject,
        Subject::Conv(_) | Subject::LeakyRelu | Subject::Sigmoid | Subject::Concat | Subject::Norm(_)
    );
    Ok(Fixture {
        subject,
        params: if operator { ids } else { Vec::new() },
        input_coords: None,
        store,
        inputs,
        aux,
    })
}

fn trainable<T: Real>(store: &ParamStore<T>) -> Vec<ParamId> {
    store.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect()
}

fn mean_all<T: Real>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &v in vars {
        let m = tape.mean(v);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| Error::arg("gradcheck", "no outputs"))
}

fn project<T: Real>(tape: &mut Tape<T>, y: Var, r: &Tensor<f32>) -> Result<Var> {
    let r = tape.leaf(r.cast());
    let p = tape.mul(y, r)?;
    Ok(tape.mean(p))
}

/// The scalar under check, in precision `T`.
fn forward<T: Real>(fx: &Fixture, tape: &mut Tape<T>, store: &ParamStore<T>, x: &[Var]) -> Result<Var> {
    let aux = || fx.aux.as_ref().expect("case has an auxiliary tensor");
    match &fx.subject {
        Subject::Conv(c) => {
            let y = c.forward(tape, store, x[0])?;
            project(tape, y, aux())
        }
        Subject::LeakyRelu => {
            let y = tape.leaky_relu(x[0], T::of(LEAKY_SLOPE));
            project(tape, y, aux())
        }
        Subject::Sigmoid => {
            let y = tape.sigmoid(x[0]);
            project(tape, y, aux())
        }
        Subject::Concat => {
            let a = tape.leaky_relu(x[0], T::of(LEAKY_SLOPE));
            let y = tape.channel_concat(a, x[1])?;
            project(tape, y, aux())
        }
        Subject::Norm(layer) => {
            let y = layer.forward(tape, store, x[0], NORM_EPS)?;
            project(tape, y, aux())
        }
        Subject::Hin(b) => {
            let y = b.forward(tape, store, x[0])?;
            Ok(tape.mean(y))
        }
        Subject::Res(b) => {
            let y = b.forward(tape, store, x[0])?;
            Ok(tape.mean(y))
        }
        Subject::Sam(s) => {
            let o = s.forward(tape, store, x[0], x[1])?;
            mean_all(tape, &[o.features, o.restored])
        }
        Subject::Csff(c) => {
            let out = c.apply(tape, store, &x[..2], &x[2..])?;
            mean_all(tape, &out)
        }
        Subject::Hinet(net) => {
            let mut net = net.cast::<T>();
            net.params = store.clone();
            let out = net.forward(tape, x[0])?;
            let y = tape.leaf(aux().cast());
            psnr_loss(tape, &out.images, y)
        }
    }
}

/// Input and parameter gradients computed in precision `T`, with the kink
/// signature of that pass.
fn analytic<T: Real>(fx: &Fixture) -> Result<(Vec<Tensor<f64>>, Vec<bool>)> {
    let mut store = fx.store.cast::<T>();
    store.zero_grad();
    let mut tape = Tape::new();
    let vars: Vec<Var> = fx.inputs.iter().map(|x| tape.leaf(x.cast())).collect();
    let out = forward(fx, &mut tape, &store, &vars)?;
    let grads = tape.backward(out, &mut store)?;
    let mut all: Vec<Tensor<f64>> = fx
        .inputs
        .iter()
        .zip(&vars)
        .map(|(x, v)| grads.get(*v).map(|g| g.cast()).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    all.extend(fx.params.iter().map(|&id| store.get(id).grad().cast()));
    Ok((all, tape.kink_signature()))
}

fn check_fixture(fx: &Fixture, precision: Precision, opts: &GradCheckOptions, stop_at_kink: bool) -> Result<GradCheckReport> {
    let (analytic, base) = match precision {
        Precision::Single => analytic::<f32>(fx)?,
        Precision::Double => analytic::<f64>(fx)?,
    };
    let wide_store = fx.store.cast::<f64>();
    let mut point: Vec<Tensor<f64>> = fx.inputs.iter().map(|x| x.cast()).collect();
    point.extend(fx.params.iter().map(|&id| wide_store.get(id).value().clone()));
    let mut limits = vec![fx.input_coords.or(opts.max_coords); fx.inputs.len()];
    limits.extend(fx.params.iter().map(|_| Some(opts.max_coords.unwrap_or(PARAM_COORDS).min(PARAM_COORDS))));
    let n_in = fx.inputs.len();
    central_differences(&analytic, &base, &point, &limits, stop_at_kink, opts, |values| {
        let mut store = wide_store.clone();
        for (&id, v) in fx.params.iter().zip(&values[n_in..]) {
            store.get_mut(id).set_value(v.clone())?;
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = values[..n_in].iter().map(|x| tape.leaf(x.clone())).collect();
        let out = forward(fx, &mut tape, &store, &vars)?;
        Ok((tape.value(out).item()?, tape.kink_signature()))
    })
}

/// Runs one case. Parameters come from `seed`; inputs are redrawn from
/// successive derived streams while a perturbation crosses a kink.
pub fn run_case(name: &str, precision: Precision, seed: u64) -> Result<CaseReport> {
    let opts = GradCheckOptions {
        seed,
        ..precision.options()
    };
    let root = RngState::new(seed);
    let mut attempt = 0;
    loop {
        let mut params_rng = root.derive(u64::MAX);
        let mut inputs_rng = root.derive(attempt);
        let fx = fixture(name, &mut params_rng, &mut inputs_rng)?;
        let last = attempt + 1 >= MAX_RESAMPLES;
        let report = check_fixture(&fx, precision, &opts, !last)?;
        if report.kink_crossings.is_empty() || last {
            return Ok(CaseReport {
                name: name.to_string(),
                precision,
                report,
                resamples: attempt,
            });
        }
        attempt += 1;
    }
}

/// Runs every case whose name contains `filter` (all when `None`).
pub fn run_suite(precision: Precision, seed: u64, filter: Option<&str>) -> Result<Vec<CaseReport>> {
    CASES
        .iter()
        .filter(|c| filter.is_none_or(|f| c.contains(f)))
        .map(|c| run_case(c, precision, seed))
        .collect()
}
