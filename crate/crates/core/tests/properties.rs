use hinet::model::{Checkpoint, HinetConfig};
use hinet::ops::conv::{conv2d_forward, conv_transpose2d_forward};
use hinet::ops::{ConvSpec, NORM_EPS};
use hinet::train::{augment, psnr, Adam, AugmentSpec, Degradation, LrSchedule, Sample, SynthDataset, PSNR_CAP};
use hinet::{Dihedral, Hinet, ParamStore, RngState, Shape4, Tape, Tensor};
use proptest::prelude::*;

fn rand(shape: Shape4, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut RngState::new(seed), 0.0, 1.0).unwrap()
}

fn instance_norm(x: &Tensor<f64>) -> Tensor<f64> {
    let c = x.shape().c;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let g = tape.leaf(Tensor::ones(Shape4::new(1, c, 1, 1).unwrap()));
    let b = tape.leaf(Tensor::zeros(Shape4::new(1, c, 1, 1).unwrap()));
    let y = tape.instance_norm(xv, g, b, NORM_EPS).unwrap();
    tape.value(y).clone()
}

fn shape4() -> impl Strategy<Value = Shape4> {
    (1usize..3, 1usize..5, 2usize..9, 2usize..9).prop_map(|(n, c, h, w)| Shape4::new(n, c, h, w).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn instance_norm_standardizes_each_plane(s in shape4(), seed in any::<u64>(), shift in -5.0f64..5.0, spread in 0.5f64..4.0) {
        let x = rand(s, seed).map(|v| shift + spread * v);
        let y = instance_norm(&x);
        let hw = (s.h * s.w) as f64;
        for n in 0..s.n {
            for c in 0..s.c {
                let vals: Vec<f64> = (0..s.h * s.w).map(|i| y.at(n, c, i / s.w, i % s.w)).collect();
                let mean = vals.iter().sum::<f64>() / hw;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw;
                prop_assert!(mean.abs() < 1e-9);
                // eps in the denominator pulls small-variance planes below one
                let xs: Vec<f64> = (0..s.h * s.w).map(|i| x.at(n, c, i / s.w, i % s.w)).collect();
                let xm = xs.iter().sum::<f64>() / hw;
                let xv = xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / hw;
                prop_assert!((var - xv / (xv + NORM_EPS)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn instance_norm_ignores_per_plane_affine_input(s in shape4(), seed in any::<u64>(), a in 0.5f64..8.0, b in -10.0f64..10.0) {
        let x = rand(s, seed);
        let y0 = instance_norm(&x.map(|v| 2.0 * v));
        let y1 = instance_norm(&x.map(|v| 2.0 * a * v + b));
        // equal up to the eps term, which shrinks as the variance grows
        prop_assert!(y0.max_abs_diff(&y1).unwrap() < 1e-4);
    }

    #[test]
    fn convolution_is_linear(cin in 1usize..4, cout in 1usize..4, k in 1usize..5, stride in 1usize..3, seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let spec = ConvSpec::new(cin, cout, k, stride, k / 2, false).unwrap();
        let s = Shape4::new(2, cin, 7, 6).unwrap();
        let (x, y, w) = (rand(s, seed), rand(s, seed ^ 1), rand(spec.weight_shape(), seed ^ 2));
        let mix = x.scale(alpha).add(&y.scale(beta)).unwrap();
        let lhs = conv2d_forward(&mix, &w, None, &spec).unwrap();
        let fx = conv2d_forward(&x, &w, None, &spec).unwrap();
        let fy = conv2d_forward(&y, &w, None, &spec).unwrap();
        let rhs = fx.scale(alpha).add(&fy.scale(beta)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn transposed_convolution_is_the_adjoint(cin in 1usize..4, cout in 1usize..4, k in 1usize..5, stride in 1usize..3, out in 2usize..6, seed in any::<u64>()) {
        let pad = (k - 1) / 2;
        let extent = (out - 1) * stride + k - 2 * pad;
        let spec = ConvSpec::new(cin, cout, k, stride, pad, false).unwrap();
        let back = ConvSpec::new(cout, cin, k, stride, pad, false).unwrap();
        let w = rand(spec.weight_shape(), seed);
        let x = rand(Shape4::new(1, cin, extent, extent).unwrap(), seed ^ 3);
        let y = rand(Shape4::new(1, cout, out, out).unwrap(), seed ^ 4);
        let ax = conv2d_forward(&x, &w, None, &spec).unwrap();
        let aty = conv_transpose2d_forward(&y, &w, None, &back).unwrap();
        prop_assert_eq!(aty.shape(), x.shape());
        let (l, r) = (ax.dot_f64(&y).unwrap(), x.dot_f64(&aty).unwrap());
        prop_assert!((l - r).abs() <= 1e-10 * (1.0 + l.abs()));
    }

    #[test]
    fn psnr_is_symmetric(s in shape4(), seed in any::<u64>()) {
        let a = rand(s, seed);
        let b = rand(s, seed ^ 5);
        prop_assert_eq!(psnr(&a, &b, 1.0, PSNR_CAP).unwrap(), psnr(&b, &a, 1.0, PSNR_CAP).unwrap());
    }

    #[test]
    fn cosine_schedule_decreases_between_its_endpoints(start in 1e-6f64..1e-2, frac in 0.0f64..1.0, total in 1u64..5000) {
        let end = start * frac;
        let s = LrSchedule::new(start, end, total);
        let mut last = f64::INFINITY;
        for step in 0..=total + 3 {
            let lr = s.lr(step);
            prop_assert!(lr <= last && lr >= end && lr <= start);
            last = lr;
        }
        prop_assert_eq!(s.lr(total), end);
    }

    #[test]
    fn adam_updates_ignore_gradient_scale(values in proptest::collection::vec(-2.0f64..2.0, 1..8), grads in proptest::collection::vec(0.01f64..5.0, 8), c in 0.01f64..100.0) {
        let n = values.len();
        let shape = Shape4::new(1, 1, 1, n).unwrap();
        let run = |scale: f64| {
            let mut store = ParamStore::<f64>::new();
            let id = store.insert("p", Tensor::from_vec(shape, values.clone()).unwrap(), true).unwrap();
            let mut adam = Adam::new(&store);
            for step in 0..3 {
                let g: Vec<f64> = grads[..n].iter().map(|g| scale * g * if step % 2 == 0 { 1.0 } else { -0.5 }).collect();
                store.zero_grad();
                store.get_mut(id).accumulate_grad(&Tensor::from_vec(shape, g).unwrap()).unwrap();
                adam.apply(&mut store, 1e-2);
            }
            store.get(id).value().clone()
        };
        prop_assert!(run(1.0).max_abs_diff(&run(c)).unwrap() < 1e-8);
    }

    #[test]
    fn augmentation_preserves_pair_psnr(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let ds = SynthDataset::procedural(Degradation::GaussianNoise(0.1), 1, 20, 12, &mut rng).unwrap();
        let s: Sample = ds.sample(&mut rng).unwrap();
        let t = augment(&s, &AugmentSpec::default(), &mut rng).unwrap();
        let before = psnr(&s.degraded, &s.clean, 1.0, PSNR_CAP).unwrap();
        let after = psnr(&t.degraded, &t.clean, 1.0, PSNR_CAP).unwrap();
        prop_assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn dihedral_inverse_undoes(s in shape4(), seed in any::<u64>(), k in 0u8..8) {
        let x = rand(s, seed);
        let d = Dihedral::all().nth(k as usize).unwrap();
        prop_assert_eq!(d.inverse().apply(&d.apply(&x)), x);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), width in 1usize..3) {
        let net: Hinet = Hinet::build(HinetConfig::tiny(2 * width), &mut RngState::new(seed)).unwrap();
        let ck = Checkpoint::from_model(&net);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), "mem").unwrap();
        prop_assert_eq!(&back, &ck);
        let again: Hinet = back.to_model().unwrap();
        for ((_, a), (_, b)) in net.params.iter().zip(again.params.iter()) {
            prop_assert_eq!(a.value(), b.value());
        }
    }
}
