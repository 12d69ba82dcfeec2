use super::*;
use crate::network::ArchSpec;
use crate::synth::{generate_object, render_scene, SceneConfig, ShapeKind};
use crate::vn::{LayerSpec, VectorFeature};

#[test]
fn adam_matches_hand_trace() {
    let mut adam = Adam::new(0.9, 0.999, 1e-8, 1);
    let mut x = [1.0];
    let expected = [0.900000002, 0.8808501989417752, 0.846107430790882];
    for (g, want) in [0.5, -0.3, 0.2].into_iter().zip(expected) {
        adam.step(&mut x, &[g], 0.1);
        assert!((x[0] - want).abs() <= 1e-15, "{} vs {want}", x[0]);
    }
}

#[test]
fn sgd_momentum_matches_hand_trace() {
    let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.5 }, 1);
    let mut x = [0.0];
    opt.step(&mut x, &[1.0], 0.1);
    assert_eq!(x[0], -0.1);
    // velocity 0.5 + 1
    opt.step(&mut x, &[1.0], 0.1);
    assert!((x[0] + 0.25).abs() < 1e-15);
}

#[test]
fn cosine_schedule_runs_from_base_to_floor() {
    let cfg = TrainConfig {
        learning_rate: 0.01,
        schedule: LrSchedule::Cosine { final_fraction: 0.1 },
        ..TrainConfig::default()
    };
    assert!((cfg.lr_at(0, 11) - 0.01).abs() < 1e-15);
    assert!((cfg.lr_at(5, 11) - 0.0055).abs() < 1e-15);
    assert!((cfg.lr_at(10, 11) - 0.001).abs() < 1e-15);
}

#[test]
fn config_validation_rejects_bad_values() {
    let bad = [
        TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            grad_clip: Some(0.0),
            ..TrainConfig::default()
        },
        TrainConfig {
            optimizer: OptimizerKind::Sgd { momentum: 1.0 },
            ..TrainConfig::default()
        },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(TrainError::ConfigInvalid(_))), "{c:?}");
    }
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn config_json_fills_defaults() {
    let c: TrainConfig = serde_json::from_str(r#"{"learning_rate": 0.01, "optimizer": {"kind": "sgd"}}"#).unwrap();
    assert_eq!(c.learning_rate, 0.01);
    assert_eq!(c.optimizer, OptimizerKind::Sgd { momentum: 0.0 });
    assert_eq!(c.batch_size, 1);
    assert_eq!(c.weights, LossWeights::default());
    let d: TrainConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(d, TrainConfig::default());
}

#[test]
fn descent_ratio_compares_first_and_last_tenth() {
    let curve: Vec<LossRow> = (0..20)
        .map(|i| LossRow {
            step: i,
            seg: 0.0,
            kp: 0.0,
            center: 0.0,
            so3: 0.0,
            total: 20.0 - i as f64,
            lr: 0.0,
        })
        .collect();
    assert_eq!(descent_ratio(&curve), Some(1.5 / 19.5));
    assert_eq!(descent_ratio(&curve[..5]), None);
    assert!(curve_csv(&curve[..1]).starts_with("step,seg,kp,center,so3,total,lr\n0,"));
}

fn tiny_arch(backbone: Vec<LayerSpec>) -> ArchSpec {
    ArchSpec {
        input_scale: 10.0,
        backbone,
        e2i_c1: Some(3),
        e2i_c2: Some(3),
        e2i_hidden: 5,
        e2i_out: 4,
        appearance_hidden: 4,
        appearance_out: 3,
        seg_hidden: 6,
        num_classes: 3,
        kp_hidden: 8,
        num_keypoints: 3,
        image_size: (640, 480),
    }
}

/// Every layer kind. Scene features have all channels of a point parallel,
/// so a VN-ReLU before any global mixing emits exact zeros wherever it
/// truncates, and batch norm is singular at zero-norm vectors; the full
/// check therefore runs on random vector features.
fn all_kinds() -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        Linear { c_out: 4 },
        GlobalConcat,
        Relu { c_out: 5 },
        BatchNorm,
        Linear { c_out: 5 },
        Relu { c_out: 4 },
    ]
}

/// About 20 points of one small object plus a little clutter.
fn small_scene(net: &Network, keypoints: usize, seed: u64) -> TrainSample {
    let model = generate_object(2, ShapeKind::Blob { radius: 0.05 }, 50, keypoints, seed).unwrap();
    let cfg = SceneConfig {
        noise_sigma: 0.001,
        occlusion: 0.6,
        background_points: 4,
        ..SceneConfig::default()
    };
    let scene = render_scene(&[&model], &cfg, seed).unwrap();
    TrainSample::from_scene(net, &scene).unwrap()
}

fn toy_scene(net: &Network, seed: u64) -> TrainSample {
    let model = generate_object(
        1,
        ShapeKind::Box {
            extents: [0.08, 0.12, 0.16],
        },
        300,
        8,
        seed,
    )
    .unwrap();
    let cfg = SceneConfig {
        noise_sigma: 0.002,
        occlusion: 0.2,
        background_points: 30,
        ..SceneConfig::default()
    };
    TrainSample::from_scene(net, &render_scene(&[&model], &cfg, seed).unwrap()).unwrap()
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let with = |so3: f64| ObjectiveConfig {
        weights: LossWeights {
            so3,
            ..LossWeights::default()
        },
        ..ObjectiveConfig::default()
    };
    let r = crate::geometry::Rotation::from_axis_angle(nalgebra::Vector3::new(0.3, -1.0, 0.5), 0.8);
    for (seed, target) in [(1, So3Target::KeypointPath), (2, So3Target::Backbone)] {
        let net = Network::init(tiny_arch(all_kinds()), seed).unwrap();
        let mut sample = small_scene(&net, 3, seed);
        let n = sample.input.features.n;
        sample.input.features = VectorFeature::random(n, 4, &mut crate::seeded_rng(seed + 100));
        let cfg = ObjectiveConfig {
            so3_target: target,
            ..with(0.5)
        };
        let rep = network_gradcheck(&net, &sample, Some(&r), &cfg, gradcheck::DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{target:?}: {rep:?}");
        assert!(rep.checked > 10 * rep.skipped_kinks.max(1), "{rep:?}");
    }
}

#[test]
fn linear_backbone_gradients_match() {
    let net = Network::init(
        tiny_arch(vec![LayerSpec::Linear { c_out: 4 }, LayerSpec::Linear { c_out: 5 }]),
        3,
    )
    .unwrap();
    let sample = small_scene(&net, 3, 3);
    let rep = network_gradcheck(
        &net,
        &sample,
        None,
        &ObjectiveConfig::default(),
        gradcheck::DEFAULT_STEP,
    )
    .unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let mut net = Network::init(ArchSpec::toy(4, 8), 4).unwrap();
    let data = vec![toy_scene(&net, 1), toy_scene(&net, 2)];
    let before = net.flat_values();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    train(&mut net, &data, &cfg, |_| {}).unwrap();
    assert_eq!(net.flat_values(), before);
}

#[test]
fn training_is_deterministic() {
    let base = Network::init(ArchSpec::toy(4, 8), 5).unwrap();
    let data = vec![toy_scene(&base, 1), toy_scene(&base, 2), toy_scene(&base, 3)];
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        seed: 7,
        ..TrainConfig::default()
    };
    let (mut a, mut b) = (base.clone(), base);
    let ca = train(&mut a, &data, &cfg, |_| {}).unwrap().curve;
    let cb = train(&mut b, &data, &cfg, |_| {}).unwrap().curve;
    assert_eq!(ca, cb);
    assert_eq!(a.flat_values(), b.flat_values());
}

#[test]
fn single_sample_overfits() {
    let mut net = Network::init(ArchSpec::toy(4, 8), 6).unwrap();
    let data = vec![toy_scene(&net, 9)];
    let cfg = TrainConfig {
        epochs: 500,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let out = train(&mut net, &data, &cfg, |_| {}).unwrap();
    assert_eq!(out.steps, 500);
    let first = out.curve[0].total;
    let last = out.curve[out.curve.len() - 10..].iter().map(|r| r.total).sum::<f64>() / 10.0;
    assert!(last <= 0.5 * first, "{first} -> {last}");
    assert!(descent_ratio(&out.curve).unwrap() < 1.0);
}

#[test]
fn non_finite_input_aborts_with_the_step() {
    let mut net = Network::init(ArchSpec::toy(4, 8), 7).unwrap();
    let mut bad = toy_scene(&net, 1);
    bad.input.features.data[0] = f64::NAN;
    let data = vec![toy_scene(&net, 2), bad];
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&mut net, &data, &cfg, |_| {}),
        Err(TrainError::NonFiniteLoss { step: 0 })
    ));
}

#[test]
fn max_steps_caps_the_run() {
    let mut net = Network::init(ArchSpec::toy(4, 8), 8).unwrap();
    let data = vec![toy_scene(&net, 1), toy_scene(&net, 2)];
    let cfg = TrainConfig {
        epochs: 10,
        max_steps: Some(3),
        ..TrainConfig::default()
    };
    let out = train(&mut net, &data, &cfg, |_| {}).unwrap();
    assert_eq!(out.steps, 3);
    assert!(!out.timed_out);
    assert!(matches!(
        train(&mut net, &[], &cfg, |_| {}),
        Err(TrainError::EmptyDataset)
    ));
}
