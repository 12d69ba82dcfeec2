use super::*;
use crate::geometry::sample_uniform_rotation;
use crate::seeded_rng;
use crate::trainer::gradcheck::{check, DEFAULT_STEP};
use crate::vn::{LayerSpec, VnStack};
use rand::Rng;

fn random_logits(n: usize, k: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_vec(n, k, (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

fn log_softmax_oracle(z: &[f64], t: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z[t] - lse
}

#[test]
fn focal_with_gamma_zero_is_cross_entropy() {
    let mut rng = seeded_rng(0);
    let z = random_logits(20, 4, &mut rng);
    let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..4)).collect();
    let (v, _) = focal_loss(&z, &labels, FocalParams { gamma: 0.0, alpha: 1.0 }).unwrap();
    let ce = -(0..20).map(|i| log_softmax_oracle(z.row(i), labels[i])).sum::<f64>() / 20.0;
    assert!((v - ce).abs() <= 1e-12, "{v} vs {ce}");
}

#[test]
fn focal_closed_form_two_class_example() {
    let z = Mat::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
    let (v, _) = focal_loss(&z, &[0], FocalParams::default()).unwrap();
    let expected = 0.25 * 0.25 * std::f64::consts::LN_2;
    assert!((v - expected).abs() <= 1e-15);
    assert!((v - 0.043321).abs() < 1e-6);
}

#[test]
fn focal_vanishes_monotonically_with_confidence() {
    let mut last = f64::INFINITY;
    for s in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let z = Mat::from_vec(1, 3, vec![s, 0.0, 0.0]).unwrap();
        let (v, _) = focal_loss(&z, &[0], FocalParams::default()).unwrap();
        assert!(v < last && v >= 0.0);
        last = v;
    }
    assert!(last < 1e-20);
}

#[test]
fn focal_rejects_bad_labels_and_params() {
    let z = Mat::zeros(2, 3);
    assert!(matches!(
        focal_loss(&z, &[0, 3], FocalParams::default()),
        Err(LossError::LabelOutOfRange {
            index: 1,
            label: 3,
            classes: 3
        })
    ));
    assert!(focal_loss(
        &z,
        &[0, 1],
        FocalParams {
            gamma: -1.0,
            alpha: 0.5
        }
    )
    .is_err());
    assert!(focal_loss(&z, &[0, 1], FocalParams { gamma: 1.0, alpha: 0.0 }).is_err());
    assert!(matches!(
        focal_loss(&Mat::zeros(0, 3), &[], FocalParams::default()),
        Err(LossError::EmptyInput)
    ));
}

#[test]
fn focal_gradient_matches_finite_differences() {
    let mut rng = seeded_rng(1);
    for gamma in [0.0, 0.5, 2.0] {
        let z = random_logits(6, 4, &mut rng);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let p = FocalParams { gamma, alpha: 0.25 };
        let (_, g) = focal_loss(&z, &labels, p).unwrap();
        let r = check(
            &mut |x| {
                focal_loss(&Mat::from_vec(6, 4, x.to_vec()).unwrap(), &labels, p)
                    .unwrap()
                    .0
            },
            &z.data,
            &g.data,
            DEFAULT_STEP,
        );
        assert!(r.max_rel_error <= 1e-4, "gamma {gamma}: {r:?}");
    }
}

fn field(n: usize, c: usize, rng: &mut impl Rng) -> VectorFeature {
    VectorFeature::random(n, c, rng)
}

#[test]
fn l1_examples() {
    let mut rng = seeded_rng(2);
    let gt = field(5, 4, &mut rng);
    let mask = vec![true, false, true, true, false];
    assert_eq!(l1_offset_loss(&gt, &gt, &mask).unwrap().value, 0.0);
    let mut pred = gt.clone();
    for ch in pred.data.chunks_exact_mut(3) {
        ch[0] += 0.1;
        ch[1] -= 0.2;
        ch[2] += 0.3;
    }
    let v = l1_offset_loss(&pred, &gt, &mask).unwrap().value;
    assert!((v - 0.6).abs() < 1e-12);
    let mut shifted = gt.clone();
    for i in 0..5 {
        let mut c = shifted.at(i, 3);
        c[0] += 0.1;
        shifted.set(i, 3, c);
    }
    assert!((center_loss(&shifted, &gt, &mask).unwrap().value - 0.1).abs() < 1e-12);
    assert_eq!(l1_offset_loss(&shifted, &gt, &mask).unwrap().value, 0.0);
}

#[test]
fn l1_matches_dense_oracle_and_gradient() {
    let mut rng = seeded_rng(3);
    let (n, c) = (7, 5);
    let pred = field(n, c, &mut rng);
    let gt = field(n, c, &mut rng);
    let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    let count = mask.iter().filter(|m| **m).count();
    let mut oracle = 0.0;
    for i in 0..n {
        if mask[i] {
            for ch in 0..c - 1 {
                let (a, b) = (pred.at(i, ch), gt.at(i, ch));
                oracle += (0..3).map(|j| (a[j] - b[j]).abs()).sum::<f64>();
            }
        }
    }
    oracle /= (count * (c - 1)) as f64;
    let l = l1_offset_loss(&pred, &gt, &mask).unwrap();
    assert!((l.value - oracle).abs() <= 1e-12);
    let r = check(
        &mut |x| {
            l1_offset_loss(&VectorFeature::from_vec(n, c, x.to_vec()).unwrap(), &gt, &mask)
                .unwrap()
                .value
        },
        &pred.data,
        &l.grad.data,
        DEFAULT_STEP,
    );
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
    let cl = center_loss(&pred, &gt, &mask).unwrap();
    let r = check(
        &mut |x| {
            center_loss(&VectorFeature::from_vec(n, c, x.to_vec()).unwrap(), &gt, &mask)
                .unwrap()
                .value
        },
        &pred.data,
        &cl.grad.data,
        DEFAULT_STEP,
    );
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn l1_empty_mask_flags_and_returns_zero() {
    let f = VectorFeature::zeros(3, 2);
    let l = l1_offset_loss(&f, &f, &[false; 3]).unwrap();
    assert!(l.empty_mask);
    assert_eq!(l.value, 0.0);
}

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    assert_eq!(total_loss(&LossParts::default(), &w).total, 0.0);
    let parts = LossParts {
        seg: 1.0,
        kp: 2.0,
        center: 3.0,
        so3: 4.0,
    };
    assert_eq!(total_loss(&parts, &w).total, 8.0);
}

#[test]
fn total_loss_matches_dot_product_oracle() {
    let mut rng = seeded_rng(4);
    for _ in 0..100 {
        let p: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..10.0));
        let l: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..2.0));
        let parts = LossParts {
            seg: p[0],
            kp: p[1],
            center: p[2],
            so3: p[3],
        };
        let w = LossWeights {
            seg: l[0],
            kp: l[1],
            center: l[2],
            so3: l[3],
        };
        let oracle = p[0] * l[0] + p[1] * l[1] + p[2] * l[2] + p[3] * l[3];
        assert!((total_loss(&parts, &w).total - oracle).abs() <= 1e-15 * oracle.max(1.0) * 4.0);
    }
}

#[test]
fn loss_weights_validation() {
    assert!(LossWeights::default().validate().is_ok());
    let w = LossWeights {
        kp: -1.0,
        ..LossWeights::default()
    };
    assert!(w.validate().is_err());
}

fn pure_stack(rng: &mut impl Rng) -> VnStack {
    use LayerSpec::*;
    VnStack::init(
        "s",
        3,
        &[
            Linear { c_out: 6 },
            Relu { c_out: 6 },
            BatchNorm,
            GlobalConcat,
            Relu { c_out: 4 },
        ],
        rng,
    )
}

#[test]
fn so3_loss_identity_rotation_is_exactly_zero() {
    let mut rng = seeded_rng(5);
    let stack = pure_stack(&mut rng);
    let v = VectorFeature::random(10, 3, &mut rng);
    let (value, _) = so3_loss(&stack, &v, &Rotation::identity()).unwrap();
    assert_eq!(value, 0.0);
}

#[test]
fn so3_loss_vanishes_on_equivariant_stack_and_not_on_broken_one() {
    let mut rng = seeded_rng(6);
    for _ in 0..20 {
        let stack = pure_stack(&mut rng);
        let v = VectorFeature::random(10, 3, &mut rng);
        let r = sample_uniform_rotation(&mut rng);
        assert!(so3_loss(&stack, &v, &r).unwrap().0 <= 1e-10);
        let broken = BrokenStack {
            stack: stack.clone(),
            tail: FlattenDense::init(stack.c_out(), 4, &mut rng),
        };
        assert!(so3_loss(&broken, &v, &r).unwrap().0 > 1e-3);
    }
}

#[test]
fn so3_loss_gradient_flows_through_both_paths() {
    let mut rng = seeded_rng(7);
    let stack = VnStack::init("s", 2, &[LayerSpec::Relu { c_out: 3 }], &mut rng);
    let mut broken = BrokenStack {
        tail: FlattenDense::init(3, 2, &mut rng),
        stack,
    };
    let v = VectorFeature::random(4, 2, &mut rng);
    let r = sample_uniform_rotation(&mut rng);
    broken.zero_grad();
    let (_, tape) = so3_loss(&broken, &v, &r).unwrap();
    let dv = so3_loss_backward(&mut broken, &tape, 1.0).unwrap();
    let rv = check(
        &mut |x| {
            so3_loss(&broken, &VectorFeature::from_vec(4, 2, x.to_vec()).unwrap(), &r)
                .unwrap()
                .0
        },
        &v.data,
        &dv.data,
        DEFAULT_STEP,
    );
    assert!(rv.max_rel_error <= 1e-4, "{rv:?}");
    let analytic = broken.trainable_grads();
    let values = broken.trainable_values();
    let mut probe = BrokenStack {
        stack: broken.stack.clone(),
        tail: broken.tail.clone(),
    };
    let rp = check(
        &mut |x| {
            probe.set_trainable_values(x);
            so3_loss(&probe, &v, &r).unwrap().0
        },
        &values,
        &analytic,
        DEFAULT_STEP,
    );
    assert!(rp.max_rel_error <= 1e-4, "{rp:?}");
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn losses_are_non_negative(seed in any::<u64>(), n in 1usize..12, k in 1usize..5) {
            let mut rng = seeded_rng(seed);
            let z = random_logits(n, k, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let gamma = rng.random_range(0.0..4.0);
            let alpha = rng.random_range(0.01..1.0);
            let fp = FocalParams { gamma, alpha };
            prop_assert!(focal_loss(&z, &labels, fp).unwrap().0 >= 0.0);
            let a = field(n, 3, &mut rng);
            let b = field(n, 3, &mut rng);
            let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            prop_assert!(l1_offset_loss(&a, &b, &mask).unwrap().value >= 0.0);
            prop_assert!(center_loss(&a, &b, &mask).unwrap().value >= 0.0);
            let r = sample_uniform_rotation(&mut rng);
            prop_assert!(so3_discrepancy(&a, &b, &r).unwrap().0 >= 0.0);
        }

        #[test]
        fn total_is_linear_in_parts(seed in any::<u64>(), s in 0.0f64..5.0) {
            let mut rng = seeded_rng(seed);
            let parts = LossParts {
                seg: rng.random_range(0.0..3.0),
                kp: rng.random_range(0.0..3.0),
                center: rng.random_range(0.0..3.0),
                so3: rng.random_range(0.0..3.0),
            };
            let w = LossWeights::default();
            let scaled = LossParts { seg: parts.seg * s, kp: parts.kp * s, center: parts.center * s, so3: parts.so3 * s };
            let a = total_loss(&parts, &w).total * s;
            let b = total_loss(&scaled, &w).total;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
