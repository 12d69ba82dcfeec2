//! Training objectives: focal segmentation loss, L1 keypoint and centre
//! offset losses, the rotation-consistency loss and their weighted sum.
//!
//! Every loss returns its value together with the gradient with respect to
//! its prediction input.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Rotation;
use crate::heads::OffsetField;
use crate::linalg::{Dense, Mat};
use crate::params::{Param, Parameterized};
use crate::vn::{rotate_feature, BnMode, StackTape, VectorFeature, VnError, VnStack};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} at point {index} is outside [0, {classes})")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Layer(#[from] VnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seg: f64,
    pub kp: f64,
    pub center: f64,
    pub so3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            kp: 1.0,
            center: 1.0,
            so3: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.seg, self.kp, self.center, self.so3];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(LossError::InvalidParameter(format!(
                "loss weights {all:?} must be finite and ≥ 0"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub seg: f64,
    pub kp: f64,
    pub center: f64,
    pub so3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub seg: f64,
    pub kp: f64,
    pub center: f64,
    pub so3: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.seg, self.kp, self.center, self.so3, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `total = λ₁·seg + λ₂·kp + λ₃·center + λ₄·so3`. The gradient of `total`
/// with respect to each part is its weight.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> LossReport {
    LossReport {
        seg: parts.seg,
        kp: parts.kp,
        center: parts.center,
        so3: parts.so3,
        total: w.seg * parts.seg + w.kp * parts.kp + w.center * parts.center + w.so3 * parts.so3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Mean over points of `−α(1 − p_t)^γ · log p_t`, with its logit gradient.
pub fn focal_loss(logits: &Mat, labels: &[usize], p: FocalParams) -> Result<(f64, Mat), LossError> {
    if !(p.gamma >= 0.0) || !(p.alpha > 0.0 && p.alpha <= 1.0) {
        return Err(LossError::InvalidParameter(format!(
            "focal gamma {} / alpha {}",
            p.gamma, p.alpha
        )));
    }
    if labels.len() != logits.rows {
        return Err(LossError::ShapeMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows
        )));
    }
    if logits.rows == 0 {
        return Err(LossError::EmptyInput);
    }
    let k = logits.cols;
    let n = logits.rows as f64;
    let mut grad = Mat::zeros(logits.rows, k);
    let mut total = 0.0;
    let mut probs = vec![0.0; k];
    for (i, &t) in labels.iter().enumerate() {
        if t >= k {
            return Err(LossError::LabelOutOfRange {
                index: i,
                label: t,
                classes: k,
            });
        }
        let z = logits.row(i);
        let zmax = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut sum = 0.0;
        for (pk, zk) in probs.iter_mut().zip(z) {
            *pk = (zk - zmax).exp();
            sum += *pk;
        }
        probs.iter_mut().for_each(|pk| *pk /= sum);
        let log_pt = z[t] - zmax - sum.ln();
        let pt = probs[t];
        // 1 − p_t without cancellation
        let q: f64 = probs.iter().enumerate().filter(|(j, _)| *j != t).map(|(_, v)| v).sum();
        let modulator = if p.gamma == 0.0 { 1.0 } else { q.powf(p.gamma) };
        total += -p.alpha * modulator * log_pt;
        // (∂L/∂p_t)·p_t
        let mut dpt_pt = -p.alpha * modulator;
        if p.gamma != 0.0 && q > 0.0 {
            dpt_pt += p.alpha * p.gamma * q.powf(p.gamma - 1.0) * pt * log_pt;
        }
        let row = grad.row_mut(i);
        for (j, g) in row.iter_mut().enumerate() {
            let delta = if j == t { 1.0 } else { 0.0 };
            *g = dpt_pt * (delta - probs[j]) / n;
        }
    }
    Ok((total / n, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct L1Loss {
    pub value: f64,
    /// Same shape as the prediction; zero outside the mask and the channel range.
    pub grad: OffsetField,
    /// Set when no point was selected; `value` is then 0.
    pub empty_mask: bool,
}

/// Mean over masked points and the channels in `channels` of
/// `‖pred − gt‖₁` per 3-vector.
pub fn l1_channels(
    pred: &OffsetField,
    gt: &OffsetField,
    mask: &[bool],
    channels: Range<usize>,
) -> Result<L1Loss, LossError> {
    if pred.n != gt.n || pred.c != gt.c || mask.len() != pred.n {
        return Err(LossError::ShapeMismatch(format!(
            "pred {}×{}, gt {}×{}, mask {}",
            pred.n,
            pred.c,
            gt.n,
            gt.c,
            mask.len()
        )));
    }
    if channels.end > pred.c || channels.is_empty() {
        return Err(LossError::ShapeMismatch(format!(
            "channel range {channels:?} outside {} channels",
            pred.c
        )));
    }
    let mut grad = VectorFeature::zeros(pred.n, pred.c);
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Ok(L1Loss {
            value: 0.0,
            grad,
            empty_mask: true,
        });
    }
    let denom = (count * channels.len()) as f64;
    let mut total = 0.0;
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for ch in channels.clone() {
            let o = (i * pred.c + ch) * 3;
            for j in 0..3 {
                let d = pred.data[o + j] - gt.data[o + j];
                total += d.abs();
                grad.data[o + j] = if d > 0.0 {
                    1.0 / denom
                } else if d < 0.0 {
                    -1.0 / denom
                } else {
                    0.0
                };
            }
        }
    }
    Ok(L1Loss {
        value: total / denom,
        grad,
        empty_mask: false,
    })
}

/// L1 loss over the keypoint channels `0..M` of an `(M+1)`-channel field.
pub fn l1_offset_loss(pred: &OffsetField, gt: &OffsetField, mask: &[bool]) -> Result<L1Loss, LossError> {
    if pred.c < 2 {
        return Err(LossError::ShapeMismatch(
            "offset field needs keypoint and centre channels".into(),
        ));
    }
    l1_channels(pred, gt, mask, 0..pred.c - 1)
}

/// L1 loss over the centre channel `M`.
pub fn center_loss(pred: &OffsetField, gt: &OffsetField, mask: &[bool]) -> Result<L1Loss, LossError> {
    if pred.c < 1 {
        return Err(LossError::ShapeMismatch("offset field has no channels".into()));
    }
    l1_channels(pred, gt, mask, pred.c - 1..pred.c)
}

/// `mean |a − b·Rᵀ|` for `a = f(V)`, `b = f(V·R)`, with gradients for both.
pub fn so3_discrepancy(
    a: &VectorFeature,
    b: &VectorFeature,
    r: &Rotation,
) -> Result<(f64, VectorFeature, VectorFeature), LossError> {
    if a.n != b.n || a.c != b.c {
        return Err(LossError::ShapeMismatch(format!(
            "paths disagree: {}×{} against {}×{}",
            a.n, a.c, b.n, b.c
        )));
    }
    if a.data.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let back = rotate_feature(b, &r.inverse());
    let count = a.data.len() as f64;
    let mut value = 0.0;
    let mut ga = VectorFeature::zeros(a.n, a.c);
    for ((x, y), g) in a.data.iter().zip(&back.data).zip(ga.data.iter_mut()) {
        let d = x - y;
        value += d.abs();
        *g = if d > 0.0 {
            1.0 / count
        } else if d < 0.0 {
            -1.0 / count
        } else {
            0.0
        };
    }
    // ∂L/∂b = (∂L/∂(b·Rᵀ))·R
    let mut gb = rotate_feature(&ga, r);
    gb.data.iter_mut().for_each(|v| *v = -*v);
    Ok((value / count, ga, gb))
}

/// A map on vector features with a recorded backward pass.
pub trait FeatureMap {
    type Tape;
    fn forward(&self, v: &VectorFeature) -> Result<(VectorFeature, Self::Tape), LossError>;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, tape: &Self::Tape, dy: &VectorFeature) -> Result<VectorFeature, LossError>;
}

impl FeatureMap for VnStack {
    type Tape = StackTape;

    /// Training-mode evaluation of the stack on a single sample.
    fn forward(&self, v: &VectorFeature) -> Result<(VectorFeature, StackTape), LossError> {
        Ok(self.forward_one(v, BnMode::Train)?)
    }

    fn backward(&mut self, tape: &StackTape, dy: &VectorFeature) -> Result<VectorFeature, LossError> {
        let mut g = VnStack::backward(self, tape, vec![dy.clone()])?;
        Ok(g.pop().expect("one sample"))
    }
}

pub struct So3Tape<T> {
    rotation: Rotation,
    plain: T,
    rotated: T,
    grad_plain: VectorFeature,
    grad_rotated: VectorFeature,
}

/// `mean |f(V) − f(V·R)·Rᵀ|` for any feature map.
pub fn so3_loss<M: FeatureMap>(map: &M, v: &VectorFeature, r: &Rotation) -> Result<(f64, So3Tape<M::Tape>), LossError> {
    let (a, plain) = map.forward(v)?;
    let (b, rotated) = map.forward(&rotate_feature(v, r))?;
    let (value, grad_plain, grad_rotated) = so3_discrepancy(&a, &b, r)?;
    Ok((
        value,
        So3Tape {
            rotation: *r,
            plain,
            rotated,
            grad_plain,
            grad_rotated,
        },
    ))
}

/// Backward through both evaluation paths, scaled by `scale`; returns `∂L/∂V`.
pub fn so3_loss_backward<M: FeatureMap>(
    map: &mut M,
    tape: &So3Tape<M::Tape>,
    scale: f64,
) -> Result<VectorFeature, LossError> {
    let scaled = |g: &VectorFeature| VectorFeature {
        n: g.n,
        c: g.c,
        data: g.data.iter().map(|v| v * scale).collect(),
    };
    let mut dv = map.backward(&tape.plain, &scaled(&tape.grad_plain))?;
    let dvr = map.backward(&tape.rotated, &scaled(&tape.grad_rotated))?;
    // V·R feeds the second path, so its gradient maps back with Rᵀ
    let back = rotate_feature(&dvr, &tape.rotation.inverse());
    for (a, b) in dv.data.iter_mut().zip(&back.data) {
        *a += b;
    }
    Ok(dv)
}

/// Non-equivariant reference map: flatten each point's channels and apply a
/// dense layer, `C×3 → C'×3` as plain scalars.
#[derive(Debug, Clone)]
pub struct FlattenDense {
    pub dense: Dense,
}

impl FlattenDense {
    pub fn init(c_in: usize, c_out: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            dense: Dense::init("flatten_dense", 3 * c_in, 3 * c_out, rng),
        }
    }
}

impl FeatureMap for FlattenDense {
    type Tape = Mat;

    fn forward(&self, v: &VectorFeature) -> Result<(VectorFeature, Mat), LossError> {
        let x = v.flatten();
        let y = self
            .dense
            .forward(&x)
            .map_err(|e| LossError::ShapeMismatch(e.to_string()))?;
        Ok((VectorFeature::from_flat(y)?, x))
    }

    fn backward(&mut self, x: &Mat, dy: &VectorFeature) -> Result<VectorFeature, LossError> {
        Ok(VectorFeature::from_flat(self.dense.backward(x, &dy.flatten()))?)
    }
}

impl Parameterized for FlattenDense {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.dense.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.dense.visit_params_mut(f);
    }
}

/// A VN stack followed by a flatten-dense layer.
#[derive(Debug, Clone)]
pub struct BrokenStack {
    pub stack: VnStack,
    pub tail: FlattenDense,
}

impl FeatureMap for BrokenStack {
    type Tape = (StackTape, Mat);

    fn forward(&self, v: &VectorFeature) -> Result<(VectorFeature, Self::Tape), LossError> {
        let (h, t1) = FeatureMap::forward(&self.stack, v)?;
        let (y, t2) = self.tail.forward(&h)?;
        Ok((y, (t1, t2)))
    }

    fn backward(&mut self, tape: &Self::Tape, dy: &VectorFeature) -> Result<VectorFeature, LossError> {
        let dh = self.tail.backward(&tape.1, dy)?;
        FeatureMap::backward(&mut self.stack, &tape.0, &dh)
    }
}

impl Parameterized for BrokenStack {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.stack.visit_params(f);
        self.tail.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stack.visit_params_mut(f);
        self.tail.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests;
