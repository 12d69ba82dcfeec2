//! Randomised equivariance and invariance checks over the layer kit.
//!
//! Each trial draws a fresh feature, fresh layer parameters and a uniform
//! rotation, evaluates both paths and records
//! `‖L(V·R) − L(V)·R‖_max / (1 + ‖L(V)‖_max)` (or the invariance analogue).
//! The report holds no timing so that a fixed seed yields identical bytes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::*;
use crate::geometry::sample_uniform_rotation;
use crate::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyKind {
    Equivariance,
    Invariance,
    HalfSpace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResidual {
    pub layer: String,
    pub property: PropertyKind,
    pub max_residual: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub trials: usize,
    pub layers: Vec<LayerResidual>,
}

impl SuiteReport {
    /// First layer whose residual exceeds `tolerance`, if any.
    pub fn first_violation(&self, tolerance: f64) -> Option<&LayerResidual> {
        self.layers.iter().find(|l| !(l.max_residual <= tolerance))
    }

    pub fn max_residual(&self) -> f64 {
        self.layers.iter().fold(0.0, |m, l| m.max(l.max_residual))
    }
}

fn invariance_residual(rotated: &Mat, plain: &Mat) -> f64 {
    let diff = rotated
        .data
        .iter()
        .zip(&plain.data)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / (1.0 + plain.max_abs())
}

fn random_layer_spec(rng: &mut impl Rng, allow_pool: bool) -> LayerSpec {
    let width = rng.random_range(1..=8);
    match rng.random_range(0..if allow_pool { 5 } else { 4 }) {
        0 => LayerSpec::Linear { c_out: width },
        1 => LayerSpec::Relu { c_out: width },
        2 => LayerSpec::BatchNorm,
        3 => LayerSpec::GlobalConcat,
        _ => LayerSpec::MeanPool,
    }
}

/// A random stack of `depth` layers; at most one mean pool and a channel cap
/// keep the cost bounded.
pub fn random_stack(c_in: usize, depth: usize, rng: &mut impl Rng) -> VnStack {
    let mut specs = Vec::with_capacity(depth);
    let mut pooled = false;
    let mut c = c_in;
    while specs.len() < depth {
        let spec = random_layer_spec(rng, !pooled);
        if spec == LayerSpec::GlobalConcat && c > 16 {
            continue;
        }
        pooled |= spec == LayerSpec::MeanPool;
        c = spec.output_channels(c);
        specs.push(spec);
    }
    VnStack::init("stack", c_in, &specs, rng)
}

fn random_mode(rng: &mut impl Rng) -> BnMode {
    if rng.random_bool(0.5) {
        BnMode::Train
    } else {
        BnMode::Eval
    }
}

fn randomise_running_stats(bn: &mut VnBatchNorm, rng: &mut impl Rng) {
    for m in &mut bn.running_mean.value {
        *m = rng.random_range(0.0..2.0);
    }
    for v in &mut bn.running_var.value {
        *v = rng.random_range(0.5..2.0);
    }
    for g in &mut bn.gamma.value {
        *g = rng.random_range(0.5..1.5);
    }
    for b in &mut bn.beta.value {
        *b = rng.random_range(-0.2..0.5);
    }
}

#[derive(Default)]
struct Tracker {
    linear: f64,
    relu: f64,
    relu_half_space: f64,
    mean_pool: f64,
    global_concat: f64,
    batch_norm: f64,
    stack: f64,
    e2i: f64,
}

/// Runs every layer check `trials` times from `seed`.
pub fn run_suite(trials: usize, seed: u64) -> SuiteReport {
    let mut rng = seeded_rng(seed);
    let mut t = Tracker::default();
    for _ in 0..trials {
        let n = rng.random_range(1..=24);
        let c = rng.random_range(1..=8);
        let c_out = rng.random_range(1..=8);
        let v = VectorFeature::random(n, c, &mut rng);
        let r = sample_uniform_rotation(&mut rng);
        let vr = rotate_feature(&v, &r);

        let lin = VnLinear::init("lin", c, c_out, &mut rng);
        let a = lin.forward(&v).expect("shapes agree");
        let b = lin.forward(&vr).expect("shapes agree");
        t.linear = t.linear.max(equivariance_residual(&b, &a, &r));

        let relu = VnRelu::init("relu", c, c_out, &mut rng);
        let (a, cache) = relu.forward(&v).expect("shapes agree");
        let (b, _) = relu.forward(&vr).expect("shapes agree");
        t.relu = t.relu.max(equivariance_residual(&b, &a, &r));
        for (o, k) in a.data.chunks_exact(3).zip(cache.k.data.chunks_exact(3)) {
            t.relu_half_space = t.relu_half_space.max(-dot3(o, k));
        }

        let a = vn_mean_pool(&v).expect("non-empty");
        let b = vn_mean_pool(&vr).expect("non-empty");
        t.mean_pool = t.mean_pool.max(equivariance_residual(&b, &a, &r));

        let a = global_concat(&v).expect("non-empty");
        let b = global_concat(&vr).expect("non-empty");
        t.global_concat = t.global_concat.max(equivariance_residual(&b, &a, &r));

        // per-sample rotations inside one batch
        let batch_size = rng.random_range(1..=4);
        let mut bn = VnBatchNorm::new("bn", c);
        randomise_running_stats(&mut bn, &mut rng);
        let batch: Vec<VectorFeature> = (0..batch_size)
            .map(|_| VectorFeature::random(rng.random_range(1..=12), c, &mut rng))
            .collect();
        let rots: Vec<Rotation> = (0..batch_size).map(|_| sample_uniform_rotation(&mut rng)).collect();
        let rotated: Vec<VectorFeature> = batch.iter().zip(&rots).map(|(x, q)| rotate_feature(x, q)).collect();
        let mode = random_mode(&mut rng);
        let (a, _) = bn.forward(&batch, mode).expect("shapes agree");
        let (b, _) = bn.forward(&rotated, mode).expect("shapes agree");
        for ((ya, yb), q) in a.iter().zip(&b).zip(&rots) {
            t.batch_norm = t.batch_norm.max(equivariance_residual(yb, ya, q));
        }

        let stack = random_stack(c, 6, &mut rng);
        let mode = random_mode(&mut rng);
        let (a, _) = stack.forward_one(&v, mode).expect("shapes agree");
        let (b, _) = stack.forward_one(&vr, mode).expect("shapes agree");
        t.stack = t.stack.max(equivariance_residual(&b, &a, &r));

        let spec = E2iSpec {
            c_in: c,
            c1: Some(rng.random_range(1..=6)),
            c2: Some(rng.random_range(1..=6)),
            hidden: 8,
            out: 4,
        };
        let e2i = E2i::init("e2i", &spec, &mut rng);
        let (a, _) = e2i.forward(&v).expect("shapes agree");
        let (b, _) = e2i.forward(&vr).expect("shapes agree");
        t.e2i = t.e2i.max(invariance_residual(&b, &a));
    }
    let entry = |layer: &str, property, max_residual| LayerResidual {
        layer: layer.to_string(),
        property,
        max_residual,
        trials,
    };
    use PropertyKind::*;
    SuiteReport {
        seed,
        trials,
        layers: vec![
            entry("vn_linear", Equivariance, t.linear),
            entry("vn_relu", Equivariance, t.relu),
            entry("vn_relu_half_space", HalfSpace, t.relu_half_space.max(0.0)),
            entry("vn_mean_pool", Equivariance, t.mean_pool),
            entry("global_concat", Equivariance, t.global_concat),
            entry("vn_batch_norm", Equivariance, t.batch_norm),
            entry("stack6", Equivariance, t.stack),
            entry("e2i", Invariance, t.e2i),
        ],
    }
}
