//! Optimisers, the training loop and the network-level gradient oracle.

pub mod gradcheck;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{sample_uniform_rotation, Rotation};
use crate::heads::OffsetField;
use crate::io::{self, IoError};
use crate::losses::{FocalParams, LossReport, LossWeights};
use crate::network::{Network, NetworkError, ObjectiveConfig, SceneInput, So3Target, Targets};
use crate::params::Parameterized;
use crate::seeded_rng;
use crate::synth::SceneSample;

use gradcheck::GradcheckReport;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss or parameters at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to `base · final_fraction`.
    Cosine { final_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the step count implied by `epochs`.
    pub max_steps: Option<usize>,
    /// Stops after the step that crosses this wall-clock budget.
    pub max_seconds: Option<f64>,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub so3_target: So3Target,
    /// A fresh rotation is drawn for every `so3_every`-th batch; 0 disables
    /// the rotated pass.
    pub so3_every: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            schedule: LrSchedule::Constant,
            batch_size: 1,
            epochs: 1,
            max_steps: None,
            max_seconds: None,
            optimizer: OptimizerKind::default(),
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            so3_target: So3Target::KeypointPath,
            so3_every: 1,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::ConfigInvalid(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if let LrSchedule::Cosine { final_fraction } = self.schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                return bad(format!("cosine final fraction {final_fraction}"));
            }
        }
        match self.optimizer {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                return bad(format!("momentum {momentum}"));
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                return bad(format!("adam betas {beta1}/{beta2}, eps {eps}"));
            }
            _ => {}
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("gradient clip {c}"));
            }
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::ConfigInvalid(e.to_string()))
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights,
            focal: self.focal,
            so3_target: self.so3_target,
        }
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine { final_fraction } => {
                let t = if total > 1 {
                    step as f64 / (total - 1) as f64
                } else {
                    1.0
                };
                let f = final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                self.learning_rate * f
            }
        }
    }
}

/// First-order optimiser state over a flat parameter vector.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { momentum: f64, velocity: Vec<f64> },
    Adam(Adam),
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, len: usize) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            x[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        match kind {
            OptimizerKind::Sgd { momentum } => Optimizer::Sgd {
                momentum,
                velocity: vec![0.0; len],
            },
            OptimizerKind::Adam { beta1, beta2, eps } => Optimizer::Adam(Adam::new(beta1, beta2, eps, len)),
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd { momentum, velocity } => {
                for i in 0..x.len() {
                    velocity[i] = *momentum * velocity[i] + g[i];
                    x[i] -= lr * velocity[i];
                }
            }
            Optimizer::Adam(a) => a.step(x, g, lr),
        }
    }
}

/// A prepared scene with its supervision.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: SceneInput,
    pub labels: Vec<usize>,
    pub offsets: OffsetField,
}

impl TrainSample {
    pub fn from_scene(net: &Network, scene: &SceneSample) -> Result<Self, NetworkError> {
        Ok(Self {
            input: net.prepare(&scene.cloud)?,
            labels: scene.labels.clone(),
            offsets: scene.gt_offsets.clone(),
        })
    }

    pub fn targets(&self) -> Targets<'_> {
        Targets {
            labels: &self.labels,
            offsets: &self.offsets,
        }
    }
}

/// One row of the loss curve: batch means of each term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub seg: f64,
    pub kp: f64,
    pub center: f64,
    pub so3: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn curve_csv(curve: &[LossRow]) -> String {
    let mut out = String::from("step,seg,kp,center,so3,total,lr\n");
    for r in curve {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.step, r.seg, r.kp, r.center, r.so3, r.total, r.lr
        ));
    }
    out
}

pub fn write_curve_csv(path: &Path, curve: &[LossRow]) -> Result<(), TrainError> {
    io::write_atomic(path, curve_csv(curve).as_bytes()).map_err(IoError::from)?;
    Ok(())
}

/// Mean total of the last tenth of steps against the first tenth.
pub fn descent_ratio(curve: &[LossRow]) -> Option<f64> {
    let k = curve.len() / 10;
    if k == 0 {
        return None;
    }
    let mean = |rows: &[LossRow]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
    Some(mean(&curve[curve.len() - k..]) / mean(&curve[..k]))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<LossRow>,
    pub steps: usize,
    pub seconds: f64,
    /// True when `max_seconds` ended the run early.
    pub timed_out: bool,
}

fn accumulate(sum: &mut LossReport, r: &LossReport) {
    sum.seg += r.seg;
    sum.kp += r.kp;
    sum.center += r.center;
    sum.so3 += r.so3;
    sum.total += r.total;
}

/// Mini-batch training. Batches are drawn from a per-epoch shuffle; the
/// gradient of every batch is the mean over its samples.
pub fn train(
    net: &mut Network,
    data: &[TrainSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRow),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let objective = cfg.objective();
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let cap = per_epoch.saturating_mul(cfg.epochs);
    let total_steps = cfg.max_steps.map_or(cap, |m| m.min(cap));
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut x = net.trainable_values();
    let mut opt = Optimizer::new(cfg.optimizer, x.len());
    let mut curve = Vec::new();
    let start = Instant::now();
    let mut timed_out = false;
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for b in 0..per_epoch {
            let step = epoch * per_epoch + b;
            if step >= total_steps {
                break 'outer;
            }
            let batch = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(data.len())];
            let rotation: Option<Rotation> =
                (cfg.so3_every > 0 && step.is_multiple_of(cfg.so3_every)).then(|| sample_uniform_rotation(&mut rng));
            net.zero_grad();
            let mut sum = LossReport::default();
            for &i in batch {
                let s = &data[i];
                let r = net.objective(&s.input, &s.targets(), rotation.as_ref(), &objective, true)?;
                if !r.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step });
                }
                accumulate(&mut sum, &r);
            }
            let inv = 1.0 / batch.len() as f64;
            let mut g = net.trainable_grads();
            g.iter_mut().for_each(|v| *v *= inv);
            if let Some(clip) = cfg.grad_clip {
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > clip {
                    let s = clip / norm;
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteLoss { step });
            }
            let lr = cfg.lr_at(step, total_steps);
            opt.step(&mut x, &g, lr);
            net.set_trainable_values(&x);
            if !net.all_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            let row = LossRow {
                step,
                seg: sum.seg * inv,
                kp: sum.kp * inv,
                center: sum.center * inv,
                so3: sum.so3 * inv,
                total: sum.total * inv,
                lr,
            };
            on_step(&row);
            curve.push(row);
            if cfg.max_seconds.is_some_and(|m| start.elapsed().as_secs_f64() >= m) {
                timed_out = step + 1 < total_steps;
                break 'outer;
            }
        }
    }
    Ok(TrainOutcome {
        steps: curve.len(),
        curve,
        seconds: start.elapsed().as_secs_f64(),
        timed_out,
    })
}

/// Finite-difference check of the full objective on one scene against the
/// analytic gradient, over every trainable parameter and every input
/// feature. Parameters come first in the reported indices.
pub fn network_gradcheck(
    net: &Network,
    sample: &TrainSample,
    rotation: Option<&Rotation>,
    cfg: &ObjectiveConfig,
    step: f64,
) -> Result<GradcheckReport, NetworkError> {
    let mut work = net.clone();
    work.zero_grad();
    let targets = sample.targets();
    let (_, dv) = work.objective_with_input_grad(&sample.input, &targets, rotation, cfg, true)?;
    let dv = dv.expect("backward requested");
    let analytic_p = work.trainable_grads();
    let x0 = net.trainable_values();

    let mut probe = net.clone();
    let mut f_params = |x: &[f64]| {
        probe.set_trainable_values(x);
        probe
            .objective(&sample.input, &targets, rotation, cfg, false)
            .map_or(f64::NAN, |r| r.total)
    };
    let rp = gradcheck::check(&mut f_params, &x0, &analytic_p, step);

    let mut fixed = net.clone();
    let mut input = sample.input.clone();
    let mut f_input = |v: &[f64]| {
        input.features.data.copy_from_slice(v);
        fixed
            .objective(&input, &targets, rotation, cfg, false)
            .map_or(f64::NAN, |r| r.total)
    };
    let ri = gradcheck::check(&mut f_input, &sample.input.features.data, &dv.data, step);
    Ok(rp.merge(&ri, x0.len()))
}

#[cfg(test)]
mod tests;
