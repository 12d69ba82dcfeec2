//! The per-scene model: input featurisation, equivariant backbone, E2I,
//! appearance encoder and both fusion heads.
//!
//! Input vector channels are built from the cloud alone. For centred points
//! `p̃ = s·(p − p̄)` and colour `(r, g, b)` the four channels are
//! `p̃, p̃·(r − ½), p̃·(g − ½), p̃·(b − ½)`. Colour is unchanged by rotating the
//! cloud, so every channel rotates with it and the backbone stays exactly
//! equivariant while still seeing appearance-weighted geometry.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backprojection::PointCloud;
use crate::geometry::Rotation;
use crate::heads::{appearance_inputs, AppearanceEncoder, FusionCache, HeadError, KpHead, OffsetField, SegHead};
use crate::linalg::{Mat, Mlp2Cache};
use crate::losses::{self, FocalParams, LossError, LossParts, LossReport, LossWeights};
use crate::params::{self, Param, ParamError, Parameterized};
use crate::seeded_rng;
use crate::vn::{
    rotate_feature, BnMode, E2i, E2iCache, E2iSpec, LayerSpec, StackTape, VectorFeature, VnError, VnStack,
};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid architecture: {0}")]
    SpecInvalid(String),
    #[error(transparent)]
    Layer(#[from] VnError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("empty cloud")]
    EmptyCloud,
}

/// Vector channels produced by [`featurize`].
pub const INPUT_CHANNELS: usize = 4;

/// Where the rotation-consistency loss is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum So3Target {
    /// Output of the equivariant backbone.
    Backbone,
    /// Keypoint-head offsets, which depend on the backbone through a
    /// flatten-and-concatenate that is not equivariant by construction.
    KeypointPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Multiplies centred coordinates before the backbone; offsets are
    /// divided by it on the way out so they stay in meters.
    pub input_scale: f64,
    pub backbone: Vec<LayerSpec>,
    pub e2i_c1: Option<usize>,
    pub e2i_c2: Option<usize>,
    pub e2i_hidden: usize,
    pub e2i_out: usize,
    pub appearance_hidden: usize,
    pub appearance_out: usize,
    pub seg_hidden: usize,
    /// Including background (class 0).
    pub num_classes: usize,
    pub kp_hidden: usize,
    pub num_keypoints: usize,
    /// Pixel-coordinate normaliser for the appearance input.
    pub image_size: (u32, u32),
}

impl ArchSpec {
    /// Three VN-linear + VN-ReLU blocks (16, 32, 32), a global mean-pool
    /// channel concatenated back per point and E2I down to 64 scalars.
    pub fn toy(num_classes: usize, num_keypoints: usize) -> Self {
        use LayerSpec::*;
        Self {
            input_scale: 10.0,
            backbone: vec![
                Linear { c_out: 16 },
                Relu { c_out: 16 },
                Linear { c_out: 32 },
                Relu { c_out: 32 },
                Linear { c_out: 32 },
                Relu { c_out: 32 },
                GlobalConcat,
            ],
            e2i_c1: Some(16),
            e2i_c2: Some(16),
            e2i_hidden: 64,
            e2i_out: 64,
            appearance_hidden: 32,
            appearance_out: 32,
            seg_hidden: 128,
            num_classes,
            kp_hidden: 128,
            num_keypoints,
            image_size: (640, 480),
        }
    }

    pub fn backbone_channels(&self) -> usize {
        self.backbone.iter().fold(INPUT_CHANNELS, |c, l| l.output_channels(c))
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::SpecInvalid(m));
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return bad(format!("input_scale {}", self.input_scale));
        }
        if self.backbone.contains(&LayerSpec::MeanPool) {
            return bad("backbone must keep per-point features (no mean_pool)".into());
        }
        let mut c = INPUT_CHANNELS;
        for l in &self.backbone {
            c = l.output_channels(c);
            if c == 0 {
                return bad(format!("zero-width layer {l:?}"));
            }
        }
        let widths = [
            ("e2i_hidden", self.e2i_hidden),
            ("e2i_out", self.e2i_out),
            ("appearance_hidden", self.appearance_hidden),
            ("appearance_out", self.appearance_out),
            ("seg_hidden", self.seg_hidden),
            ("kp_hidden", self.kp_hidden),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return bad(format!("{name} must be positive"));
        }
        if matches!(self.e2i_c1, Some(0)) || matches!(self.e2i_c2, Some(0)) {
            return bad("E2I branch widths must be positive".into());
        }
        if self.num_keypoints < 3 {
            return bad(format!("{} keypoints; need at least 3", self.num_keypoints));
        }
        Ok(())
    }
}

/// Network inputs derived from one cloud.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub features: VectorFeature,
    pub appearance: Mat,
}

/// Builds the four input vector channels; see the module docs.
pub fn featurize(cloud: &PointCloud, scale: f64) -> Result<VectorFeature, NetworkError> {
    let attrs = cloud
        .attributes
        .as_ref()
        .filter(|a| a.cols >= 3)
        .ok_or_else(|| HeadError::MissingAttributes("cloud has no RGB attributes".into()))?;
    let n = cloud.len();
    if n == 0 {
        return Err(NetworkError::EmptyCloud);
    }
    let centroid = cloud.points.iter().fold(nalgebra::Vector3::zeros(), |a, p| a + p) / n as f64;
    let mut v = VectorFeature::zeros(n, INPUT_CHANNELS);
    for (i, p) in cloud.points.iter().enumerate() {
        let d = (p - centroid) * scale;
        let d = [d.x, d.y, d.z];
        v.set(i, 0, d);
        let rgb = attrs.row(i);
        for k in 0..3 {
            let w = rgb[k] - 0.5;
            v.set(i, k + 1, [d[0] * w, d[1] * w, d[2] * w]);
        }
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct NetworkOutput {
    pub logits: Mat,
    /// Meters, `keypoint − point`.
    pub offsets: OffsetField,
}

#[derive(Debug, Clone)]
pub struct NetworkTape {
    backbone: StackTape,
    equi: VectorFeature,
    e2i: E2iCache,
    appearance: Mlp2Cache,
    app_feature: Mat,
    seg: FusionCache,
    kp: FusionCache,
}

/// Gradients arriving at the network outputs.
pub struct OutputGrads<'a> {
    pub logits: &'a Mat,
    pub offsets: &'a OffsetField,
}

/// Second keypoint-path (or backbone) evaluation on the rotated input.
pub struct So3Tape {
    backbone: StackTape,
    kp: Option<FusionCache>,
    /// Gradient for the unrotated output.
    grad_plain: VectorFeature,
    /// Gradient for the rotated output.
    grad_rotated: VectorFeature,
    rotation: Rotation,
    target: So3Target,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub arch: ArchSpec,
    pub backbone: VnStack,
    pub e2i: E2i,
    pub appearance: AppearanceEncoder,
    pub seg: SegHead,
    pub kp: KpHead,
}

/// Supervision for one scene.
#[derive(Debug, Clone)]
pub struct Targets<'a> {
    pub labels: &'a [usize],
    pub offsets: &'a OffsetField,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub so3_target: So3Target,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            so3_target: So3Target::KeypointPath,
        }
    }
}

impl Network {
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self, NetworkError> {
        arch.validate()?;
        let mut rng = seeded_rng(seed);
        Ok(Self::init_with(arch, &mut rng))
    }

    fn init_with(arch: ArchSpec, rng: &mut impl Rng) -> Self {
        let backbone = VnStack::init("backbone", INPUT_CHANNELS, &arch.backbone, rng);
        let c = backbone.c_out();
        let e2i = E2i::init(
            "e2i",
            &E2iSpec {
                c_in: c,
                c1: arch.e2i_c1,
                c2: arch.e2i_c2,
                hidden: arch.e2i_hidden,
                out: arch.e2i_out,
            },
            rng,
        );
        let appearance = AppearanceEncoder::init(arch.appearance_hidden, arch.appearance_out, rng);
        let seg = SegHead::init(
            arch.e2i_out,
            arch.appearance_out,
            arch.seg_hidden,
            arch.num_classes,
            rng,
        );
        let kp = KpHead::init(c, arch.appearance_out, arch.kp_hidden, arch.num_keypoints, rng);
        Self {
            arch,
            backbone,
            e2i,
            appearance,
            seg,
            kp,
        }
    }

    pub fn prepare(&self, cloud: &PointCloud) -> Result<SceneInput, NetworkError> {
        Ok(SceneInput {
            features: featurize(cloud, self.arch.input_scale)?,
            appearance: appearance_inputs(cloud, self.arch.image_size)?,
        })
    }

    fn offsets_to_meters(&self, mut raw: OffsetField) -> OffsetField {
        let inv = 1.0 / self.arch.input_scale;
        raw.data.iter_mut().for_each(|v| *v *= inv);
        raw
    }

    fn scaled(&self, g: &VectorFeature) -> VectorFeature {
        let inv = 1.0 / self.arch.input_scale;
        VectorFeature {
            n: g.n,
            c: g.c,
            data: g.data.iter().map(|v| v * inv).collect(),
        }
    }

    pub fn forward(&self, input: &SceneInput, mode: BnMode) -> Result<(NetworkOutput, NetworkTape), NetworkError> {
        let (equi, backbone) = self.backbone.forward_one(&input.features, mode)?;
        let (inv, e2i) = self.e2i.forward(&equi)?;
        let (app_feature, appearance) = self.appearance.forward(&input.appearance)?;
        let (logits, seg) = self.seg.forward(&inv, &app_feature)?;
        let (raw, kp) = self.kp.forward(&equi, &app_feature)?;
        Ok((
            NetworkOutput {
                logits,
                offsets: self.offsets_to_meters(raw),
            },
            NetworkTape {
                backbone,
                equi,
                e2i,
                appearance,
                app_feature,
                seg,
                kp,
            },
        ))
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<NetworkOutput, NetworkError> {
        Ok(self.forward(&self.prepare(cloud)?, BnMode::Eval)?.0)
    }

    /// Keypoint offsets computed from given backbone features and the fixed
    /// appearance feature of `tape`.
    fn kp_from(&self, equi: &VectorFeature, app: &Mat) -> Result<(OffsetField, FusionCache), NetworkError> {
        let (raw, cache) = self.kp.forward(equi, app)?;
        Ok((self.offsets_to_meters(raw), cache))
    }

    /// Rotation-consistency loss at `target`, evaluated against a recorded
    /// forward pass. The rotated path reuses the plain appearance feature.
    pub fn so3_forward(
        &self,
        input: &SceneInput,
        output: &NetworkOutput,
        tape: &NetworkTape,
        r: &Rotation,
        target: So3Target,
        mode: BnMode,
    ) -> Result<(f64, So3Tape), NetworkError> {
        let vr = rotate_feature(&input.features, r);
        let (equi_r, backbone) = self.backbone.forward_one(&vr, mode)?;
        let (value, grad_plain, grad_rotated, kp) = match target {
            So3Target::Backbone => {
                let (v, ga, gb) = losses::so3_discrepancy(&tape.equi, &equi_r, r)?;
                (v, ga, gb, None)
            }
            So3Target::KeypointPath => {
                let (off_r, kp) = self.kp_from(&equi_r, &tape.app_feature)?;
                let (v, ga, gb) = losses::so3_discrepancy(&output.offsets, &off_r, r)?;
                (v, ga, gb, Some(kp))
            }
        };
        Ok((
            value,
            So3Tape {
                backbone,
                kp,
                grad_plain,
                grad_rotated,
                rotation: *r,
                target,
            },
        ))
    }

    /// Residual of the keypoint path under one rotation, in eval mode.
    pub fn kp_equivariance_residual(&self, input: &SceneInput, r: &Rotation) -> Result<f64, NetworkError> {
        let (out, tape) = self.forward(input, BnMode::Eval)?;
        Ok(self
            .so3_forward(input, &out, &tape, r, So3Target::KeypointPath, BnMode::Eval)?
            .0)
    }

    /// Accumulates parameter gradients; returns `∂L/∂features`.
    pub fn backward(
        &mut self,
        tape: &NetworkTape,
        grads: OutputGrads<'_>,
        so3: Option<(&So3Tape, f64)>,
    ) -> Result<VectorFeature, NetworkError> {
        let mut d_offsets = grads.offsets.clone();
        let mut d_equi_extra: Option<VectorFeature> = None;
        let mut d_app = Mat::zeros(tape.app_feature.rows, tape.app_feature.cols);
        let mut d_features_rot = None;
        if let Some((s, weight)) = so3 {
            let scale = |g: &VectorFeature| VectorFeature {
                n: g.n,
                c: g.c,
                data: g.data.iter().map(|v| v * weight).collect(),
            };
            let ga = scale(&s.grad_plain);
            let gb = scale(&s.grad_rotated);
            let d_equi_r = match s.target {
                So3Target::Backbone => {
                    d_equi_extra = Some(ga);
                    gb
                }
                So3Target::KeypointPath => {
                    for (a, b) in d_offsets.data.iter_mut().zip(&ga.data) {
                        *a += b;
                    }
                    let kp_cache = s.kp.as_ref().ok_or(VnError::NoForwardRecorded)?;
                    let (de, da) = self.kp.backward(kp_cache, &self.scaled(&gb));
                    for (a, b) in d_app.data.iter_mut().zip(&da.data) {
                        *a += b;
                    }
                    de
                }
            };
            let mut dvr = self.backbone.backward(&s.backbone, vec![d_equi_r])?;
            d_features_rot = Some(rotate_feature(&dvr.pop().expect("one sample"), &s.rotation.inverse()));
        }
        let (d_inv, da_seg) = self.seg.backward(&tape.seg, grads.logits);
        let (mut d_equi, da_kp) = self.kp.backward(&tape.kp, &self.scaled(&d_offsets));
        for ((a, b), c) in d_app.data.iter_mut().zip(&da_seg.data).zip(&da_kp.data) {
            *a += b + c;
        }
        self.appearance.backward(&tape.appearance, &d_app);
        let d_equi_e2i = self.e2i.backward(&tape.e2i, &d_inv);
        for (a, b) in d_equi.data.iter_mut().zip(&d_equi_e2i.data) {
            *a += b;
        }
        if let Some(extra) = d_equi_extra {
            for (a, b) in d_equi.data.iter_mut().zip(&extra.data) {
                *a += b;
            }
        }
        let mut dv = self.backbone.backward(&tape.backbone, vec![d_equi])?;
        let mut dv = dv.pop().expect("one sample");
        if let Some(rot) = d_features_rot {
            for (a, b) in dv.data.iter_mut().zip(&rot.data) {
                *a += b;
            }
        }
        Ok(dv)
    }

    /// Weighted objective on one scene. With `backward` set, parameter
    /// gradients of `total` are accumulated.
    pub fn objective(
        &mut self,
        input: &SceneInput,
        targets: &Targets<'_>,
        rotation: Option<&Rotation>,
        cfg: &ObjectiveConfig,
        backward: bool,
    ) -> Result<LossReport, NetworkError> {
        Ok(self
            .objective_with_input_grad(input, targets, rotation, cfg, backward)?
            .0)
    }

    /// [`Network::objective`] that also returns `∂total/∂features` when
    /// `backward` is set.
    pub fn objective_with_input_grad(
        &mut self,
        input: &SceneInput,
        targets: &Targets<'_>,
        rotation: Option<&Rotation>,
        cfg: &ObjectiveConfig,
        backward: bool,
    ) -> Result<(LossReport, Option<VectorFeature>), NetworkError> {
        let mode = BnMode::Train;
        let (out, tape) = self.forward(input, mode)?;
        let fg: Vec<bool> = targets.labels.iter().map(|&l| l != 0).collect();
        let (seg, d_logits) = losses::focal_loss(&out.logits, targets.labels, cfg.focal)?;
        let kp = losses::l1_offset_loss(&out.offsets, targets.offsets, &fg)?;
        let center = losses::center_loss(&out.offsets, targets.offsets, &fg)?;
        let so3 = match rotation {
            Some(r) => Some(self.so3_forward(input, &out, &tape, r, cfg.so3_target, mode)?),
            None => None,
        };
        let parts = LossParts {
            seg,
            kp: kp.value,
            center: center.value,
            so3: so3.as_ref().map_or(0.0, |s| s.0),
        };
        let report = losses::total_loss(&parts, &cfg.weights);
        if backward {
            let w = &cfg.weights;
            let mut d_logits = d_logits;
            d_logits.data.iter_mut().for_each(|g| *g *= w.seg);
            let mut d_off = VectorFeature::zeros(out.offsets.n, out.offsets.c);
            for ((d, a), b) in d_off.data.iter_mut().zip(&kp.grad.data).zip(&center.grad.data) {
                *d = w.kp * a + w.center * b;
            }
            let dv = self.backward(
                &tape,
                OutputGrads {
                    logits: &d_logits,
                    offsets: &d_off,
                },
                so3.as_ref().filter(|_| w.so3 > 0.0).map(|(_, t)| (t, w.so3)),
            )?;
            self.backbone.commit_running_stats(&tape.backbone);
            return Ok((report, Some(dv)));
        }
        Ok((report, None))
    }

    pub fn architecture_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.arch).expect("architecture serialises")
    }

    pub fn save(&self, bin: &Path, manifest: &Path) -> Result<(), NetworkError> {
        params::save(self, self.architecture_json(), bin, manifest)?;
        Ok(())
    }

    /// Rebuilds the network described by a manifest and loads its tensors.
    pub fn load(bin: &Path, manifest: &Path) -> Result<Self, NetworkError> {
        let m = params::read_manifest(manifest)?;
        let arch: ArchSpec = serde_json::from_value(m.architecture.clone())
            .map_err(|e| NetworkError::SpecInvalid(format!("manifest architecture: {e}")))?;
        let mut net = Network::init(arch, 0)?;
        let blob = std::fs::read(bin).map_err(ParamError::from)?;
        params::decode_into(&mut net, &blob, &m)?;
        Ok(net)
    }
}

impl Parameterized for Network {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.backbone.visit_params(f);
        self.e2i.visit_params(f);
        self.appearance.visit_params(f);
        self.seg.visit_params(f);
        self.kp.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_params_mut(f);
        self.e2i.visit_params_mut(f);
        self.appearance.visit_params_mut(f);
        self.seg.visit_params_mut(f);
        self.kp.visit_params_mut(f);
    }
}
