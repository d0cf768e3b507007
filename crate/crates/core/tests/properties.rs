//! Algebraic invariants of the numeric ops, checked on random inputs.

mod common;

use common::bap_oracle;
use proptest::prelude::*;
use wsban::bap::{bap, bilinearity_probe};
use wsban::localization::{self, BoundingBox, ObjectMask};
use wsban::nn::{self, PoolMode};
use wsban::{Tape, Tensor};

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

/// `(b, h, w, n, m)` for small BAP instances.
fn bap_dims() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    (1usize..3, 1usize..5, 1usize..5, 1usize..5, 1usize..6)
}

fn bap_instance() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    bap_dims().prop_flat_map(|(b, h, w, n, m)| {
        (values(b * h * w * n), prop::collection::vec(0.0f64..1.0, b * h * w * m)).prop_map(move |(f, a)| {
            (tensor(&[b, h, w, n], f), tensor(&[b, h, w, m], a))
        })
    })
}

fn unary(x: Tensor<f32>, op: impl Fn(&mut Tape<f32>, wsban::Var) -> wsban::Result<wsban::Var>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let y = op(&mut tape, v).unwrap();
    tape.value(y).clone()
}

fn boxes() -> impl Strategy<Value = BoundingBox> {
    (0.0f64..0.9, 0.0f64..0.9, 0.01f64..1.0, 0.01f64..1.0).prop_map(|(x0, y0, fw, fh)| {
        let x1 = x0 + (1.0 - x0) * fw;
        let y1 = y0 + (1.0 - y0) * fh;
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    })
}

fn masks() -> impl Strategy<Value = ObjectMask> {
    (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..1.0], h * w)
            .prop_map(move |v| ObjectMask::new(h, w, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn global_average_pool_is_linear(
        (h, w, c) in (1usize..5, 1usize..5, 1usize..4),
        alpha in -3.0f32..3.0,
        beta in -3.0f32..3.0,
        seed in any::<u64>(),
    ) {
        let len = h * w * c;
        let x = Tensor::<f32>::new(&[1, h, w, c], wsban::Init::Uniform { bound: 1.0, seed }).unwrap();
        let y = Tensor::<f32>::new(&[1, h, w, c], wsban::Init::Uniform { bound: 1.0, seed: seed ^ 1 }).unwrap();
        let mix: Vec<f32> = x.data().iter().zip(y.data()).map(|(&a, &b)| alpha * a + beta * b).collect();
        let gap = |t: Tensor<f32>| unary(t, |tp, v| tp.global_pool(v, PoolMode::Gap));
        let lhs = gap(Tensor::from_vec(&[1, h, w, c], mix).unwrap());
        let (gx, gy) = (gap(x), gap(y));
        prop_assert_eq!(lhs.len(), c);
        prop_assert!(len > 0);
        for i in 0..c {
            let rhs = alpha * gx.data()[i] + beta * gy.data()[i];
            let scale = alpha.abs() + beta.abs() + 1.0;
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-5 * scale, "{} vs {}", lhs.data()[i], rhs);
        }
    }

    #[test]
    fn sign_sqrt_is_odd(v in prop::collection::vec(-1e6f32..1e6, 1..32)) {
        let n = v.len();
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        let pos = unary(Tensor::from_vec(&[1, n], v).unwrap(), |t, x| t.sign_sqrt(x));
        let flipped = unary(Tensor::from_vec(&[1, n], neg).unwrap(), |t, x| t.sign_sqrt(x));
        for (a, b) in pos.data().iter().zip(flipped.data()) {
            prop_assert_eq!(a.to_bits(), (-b).to_bits());
        }
    }

    #[test]
    fn l2_normalize_is_idempotent(v in prop::collection::vec(-10.0f32..10.0, 1..64)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let n = v.len();
        let once = unary(Tensor::from_vec(&[1, n], v).unwrap(), |t, x| t.l2_normalize(x));
        let twice = unary(once.clone(), |t, x| t.l2_normalize(x));
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one((rows, classes) in (1usize..6, 1usize..12), seed in any::<u64>(), spread in 0.1f64..50.0) {
        let logits = Tensor::<f32>::new(&[rows * classes], wsban::Init::Uniform { bound: spread, seed }).unwrap();
        let probs = nn::softmax_rows(logits.data(), classes);
        for row in probs.chunks(classes) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "{}", s);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn bap_matches_the_per_part_loop((f, a) in bap_instance()) {
        let p = bap(&f, &a, PoolMode::Gap).unwrap();
        let oracle = bap_oracle(&f, &a);
        prop_assert_eq!(p.data().len(), oracle.len());
        for (x, y) in p.data().iter().zip(&oracle) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn bap_permutes_rows_with_attention_channels(
        ((f, a), perm) in bap_instance().prop_flat_map(|(f, a)| {
            let m = a.shape()[3];
            (Just((f, a)), Just((0..m).collect::<Vec<usize>>()).prop_shuffle())
        }),
    ) {
        let m = a.shape()[3];
        let n = f.shape()[3];
        let permuted: Vec<f64> = a
            .data()
            .chunks(m)
            .flat_map(|px| perm.iter().map(move |&k| px[k]))
            .collect();
        let a2 = tensor(a.shape(), permuted);
        for mode in [PoolMode::Gap, PoolMode::Gmp] {
            let p = bap(&f, &a, mode).unwrap();
            let p2 = bap(&f, &a2, mode).unwrap();
            for bi in 0..f.shape()[0] {
                for (k, &src) in perm.iter().enumerate() {
                    let got = &p2.data()[(bi * m + k) * n..(bi * m + k + 1) * n];
                    let want = &p.data()[(bi * m + src) * n..(bi * m + src + 1) * n];
                    prop_assert_eq!(got, want);
                }
            }
        }
    }

    #[test]
    fn bap_is_bilinear((f, a) in bap_instance(), alpha in -4.0f64..4.0) {
        let r = bilinearity_probe(&f, &a, alpha).unwrap();
        prop_assert!(r.holds(1e-5), "{:?}", r);
    }

    #[test]
    fn iou_is_symmetric(a in boxes(), b in boxes()) {
        prop_assert_eq!(localization::iou(&a, &b).to_bits(), localization::iou(&b, &a).to_bits());
        prop_assert_eq!(localization::iou(&a, &a), 1.0);
        let v = localization::iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn localize_ignores_mask_scale(mask in masks(), c in 1e-3f64..1e3, theta in 0.05f64..0.95) {
        let scaled = ObjectMask::new(mask.height, mask.width, mask.values.iter().map(|v| v * c).collect()).unwrap();
        prop_assert_eq!(localization::localize(&mask, theta), localization::localize(&scaled, theta));
    }

    #[test]
    fn localized_box_covers_its_component(mask in masks(), theta in 0.05f64..0.95) {
        let loc = localization::localize_detailed(&mask, theta);
        let (w, h) = (mask.width as f64, mask.height as f64);
        for &(i, j) in &loc.component {
            let cell = BoundingBox::new(j as f64 / w, i as f64 / h, (j + 1) as f64 / w, (i + 1) as f64 / h).unwrap();
            prop_assert!(loc.bbox.contains(&cell));
            prop_assert!(mask.get(i, j) >= theta * mask.max());
        }
    }

    #[test]
    fn mean_map_ignores_channel_order((h, w, m) in (1usize..5, 1usize..5, 1usize..6), seed in any::<u64>()) {
        let a = Tensor::<f64>::new(&[h, w, m], wsban::Init::Uniform { bound: 1.0, seed }).unwrap();
        let reversed: Vec<f64> = a.data().chunks(m).flat_map(|px| px.iter().rev().copied()).collect();
        let s1 = localization::mean_attention_map(&a).unwrap();
        let s2 = localization::mean_attention_map(&tensor(&[h, w, m], reversed)).unwrap();
        for (x, y) in s1.values.iter().zip(&s2.values) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
