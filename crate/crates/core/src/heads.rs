//! Appearance encoder and the two fusion heads.
//!
//! Both heads concatenate a geometric feature with the appearance feature per
//! point and apply two dense layers with a ReLU between them:
//!
//! - segmentation: `[F_inv ‖ F_app] → K` class logits,
//! - keypoints: `[flatten(F_equi) ‖ F_app] → (M+1)·3` offsets, read back as
//!   `M+1` vector channels (`M` keypoints, then the centre).
//!
//! Flattening is channel-major then xyz, matching [`VectorFeature::flatten`].

use rand::Rng;
use thiserror::Error;

use crate::backprojection::PointCloud;
use crate::linalg::{Mat, Mlp2, Mlp2Cache};
use crate::params::{Param, Parameterized};
use crate::vn::VectorFeature;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("missing attributes: {0}")]
    MissingAttributes(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl From<crate::linalg::ShapeError> for HeadError {
    fn from(e: crate::linalg::ShapeError) -> Self {
        HeadError::ShapeMismatch(e.to_string())
    }
}

/// Per-point offsets `keypoint − point`: channel `j < M` is keypoint `j`,
/// channel `M` is the object centre.
pub type OffsetField = VectorFeature;

/// Width of the raw appearance input: RGB plus normalised pixel x, y.
pub const APPEARANCE_INPUTS: usize = 5;

/// `[r, g, b, x/W, y/H]` per point. Without pixel origins the position
/// columns are zero.
pub fn appearance_inputs(cloud: &PointCloud, image_size: (u32, u32)) -> Result<Mat, HeadError> {
    let attrs = cloud
        .attributes
        .as_ref()
        .ok_or_else(|| HeadError::MissingAttributes("cloud has no RGB attributes".into()))?;
    if attrs.cols < 3 {
        return Err(HeadError::MissingAttributes(format!(
            "need 3 colour attributes, cloud has {}",
            attrs.cols
        )));
    }
    let (w, h) = (image_size.0.max(1) as f64, image_size.1.max(1) as f64);
    let mut m = Mat::zeros(cloud.len(), APPEARANCE_INPUTS);
    for i in 0..cloud.len() {
        let row = m.row_mut(i);
        row[..3].copy_from_slice(&attrs.row(i)[..3]);
        if let Some(px) = &cloud.pixel_origin {
            row[3] = px[i][0] as f64 / w;
            row[4] = px[i][1] as f64 / h;
        }
    }
    Ok(m)
}

/// Stand-in appearance encoder: a per-point two-layer perceptron.
#[derive(Debug, Clone)]
pub struct AppearanceEncoder {
    pub mlp: Mlp2,
}

impl AppearanceEncoder {
    pub fn init(hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp2::init("appearance", APPEARANCE_INPUTS, hidden, out, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.mlp.fc2.outputs()
    }

    pub fn forward(&self, inputs: &Mat) -> Result<(Mat, Mlp2Cache), HeadError> {
        Ok(self.mlp.forward(inputs)?)
    }

    pub fn encode(&self, cloud: &PointCloud, image_size: (u32, u32)) -> Result<Mat, HeadError> {
        Ok(self.forward(&appearance_inputs(cloud, image_size)?)?.0)
    }

    pub fn backward(&mut self, cache: &Mlp2Cache, dy: &Mat) {
        self.mlp.backward(cache, dy);
    }
}

impl Parameterized for AppearanceEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.mlp.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.mlp.visit_params_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    split: usize,
    mlp: Mlp2Cache,
}

fn check_rows(geo: usize, app: &Mat) -> Result<(), HeadError> {
    if geo != app.rows {
        return Err(HeadError::ShapeMismatch(format!(
            "{geo} geometric rows against {} appearance rows",
            app.rows
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SegHead {
    pub mlp: Mlp2,
}

impl SegHead {
    pub fn init(inv: usize, app: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp2::init("seg_head", inv + app, hidden, classes, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.mlp.fc2.outputs()
    }

    pub fn forward(&self, inv: &Mat, app: &Mat) -> Result<(Mat, FusionCache), HeadError> {
        check_rows(inv.rows, app)?;
        let (y, mlp) = self.mlp.forward(&inv.hconcat(app)?)?;
        Ok((y, FusionCache { split: inv.cols, mlp }))
    }

    /// Returns `(∂L/∂F_inv, ∂L/∂F_app)`.
    pub fn backward(&mut self, cache: &FusionCache, dy: &Mat) -> (Mat, Mat) {
        self.mlp.backward(&cache.mlp, dy).hsplit(cache.split)
    }
}

impl Parameterized for SegHead {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.mlp.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.mlp.visit_params_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct KpHead {
    pub mlp: Mlp2,
    /// Offset channels produced: keypoints plus one centre.
    pub channels: usize,
}

impl KpHead {
    pub fn init(equi: usize, app: usize, hidden: usize, keypoints: usize, rng: &mut impl Rng) -> Self {
        let channels = keypoints + 1;
        Self {
            mlp: Mlp2::init("kp_head", 3 * equi + app, hidden, 3 * channels, rng),
            channels,
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.channels - 1
    }

    pub fn forward(&self, equi: &VectorFeature, app: &Mat) -> Result<(OffsetField, FusionCache), HeadError> {
        check_rows(equi.n, app)?;
        let flat = equi.flatten();
        let (y, mlp) = self.mlp.forward(&flat.hconcat(app)?)?;
        let out = VectorFeature::from_flat(y).expect("3·channels columns");
        Ok((out, FusionCache { split: flat.cols, mlp }))
    }

    /// Returns `(∂L/∂F_equi, ∂L/∂F_app)`.
    pub fn backward(&mut self, cache: &FusionCache, dy: &OffsetField) -> (VectorFeature, Mat) {
        let (d_equi, d_app) = self.mlp.backward(&cache.mlp, &dy.flatten()).hsplit(cache.split);
        (VectorFeature::from_flat(d_equi).expect("3·C columns"), d_app)
    }
}

impl Parameterized for KpHead {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.mlp.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.mlp.visit_params_mut(f);
    }
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_labels(logits: &Mat) -> Vec<usize> {
    (0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use nalgebra::Vector3;

    fn dense_oracle(x: &Mat, mlp: &Mlp2) -> Mat {
        let layer = |x: &Mat, w: &Param, b: &Param, relu: bool| {
            let (o, i) = (w.shape[0], w.shape[1]);
            let mut y = Mat::zeros(x.rows, o);
            for r in 0..x.rows {
                for a in 0..o {
                    let mut s = b.value[a];
                    for c in 0..i {
                        s += w.value[a * i + c] * x.get(r, c);
                    }
                    y.row_mut(r)[a] = if relu { s.max(0.0) } else { s };
                }
            }
            y
        };
        let h = layer(x, &mlp.fc1.weight, &mlp.fc1.bias, true);
        layer(&h, &mlp.fc2.weight, &mlp.fc2.bias, false)
    }

    fn random_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn appearance_matches_dense_oracle() {
        let mut rng = seeded_rng(0);
        let enc = AppearanceEncoder::init(16, 8, &mut rng);
        let x = random_mat(10, APPEARANCE_INPUTS, &mut rng);
        let (y, _) = enc.forward(&x).unwrap();
        let e = dense_oracle(&x, &enc.mlp);
        for (a, b) in y.data.iter().zip(&e.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = seeded_rng(1);
        let mut enc = AppearanceEncoder::init(4, 3, &mut rng);
        enc.mlp
            .visit_params_mut(&mut |p| p.value.iter_mut().for_each(|v| *v = 0.0));
        enc.mlp.fc2.bias.value = vec![0.5, -1.0, 2.0];
        let (y, _) = enc.forward(&random_mat(6, APPEARANCE_INPUTS, &mut rng)).unwrap();
        for r in 0..6 {
            assert_eq!(y.row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn appearance_requires_attributes() {
        let cloud = PointCloud::new(vec![Vector3::zeros()], None, None).unwrap();
        assert!(matches!(
            appearance_inputs(&cloud, (640, 480)),
            Err(HeadError::MissingAttributes(_))
        ));
    }

    #[test]
    fn appearance_inputs_normalise_pixels() {
        let cloud = PointCloud::new(
            vec![Vector3::zeros()],
            Some(Mat::from_vec(1, 3, vec![0.1, 0.2, 0.3]).unwrap()),
            Some(vec![[320, 120]]),
        )
        .unwrap();
        let m = appearance_inputs(&cloud, (640, 480)).unwrap();
        assert_eq!(m.row(0), &[0.1, 0.2, 0.3, 0.5, 0.25]);
    }

    #[test]
    fn seg_head_zero_features_give_final_bias() {
        let mut rng = seeded_rng(2);
        let mut head = SegHead::init(4, 3, 8, 2, &mut rng);
        head.mlp.fc2.bias.value = vec![0.25, -0.75];
        let (y, _) = head.forward(&Mat::zeros(3, 4), &Mat::zeros(3, 3)).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &[0.25, -0.75]);
        }
    }

    #[test]
    fn kp_head_matches_dense_oracle_and_layout() {
        let mut rng = seeded_rng(3);
        let head = KpHead::init(3, 4, 10, 2, &mut rng);
        let equi = VectorFeature::random(5, 3, &mut rng);
        let app = random_mat(5, 4, &mut rng);
        let (y, _) = head.forward(&equi, &app).unwrap();
        assert_eq!((y.n, y.c), (5, 3));
        let e = dense_oracle(&equi.flatten().hconcat(&app).unwrap(), &head.mlp);
        for (a, b) in y.data.iter().zip(&e.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn kp_head_zero_weights_give_constant_offsets() {
        let mut rng = seeded_rng(4);
        let mut head = KpHead::init(2, 2, 4, 1, &mut rng);
        head.mlp
            .visit_params_mut(&mut |p| p.value.iter_mut().for_each(|v| *v = 0.0));
        head.mlp.fc2.bias.value = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (y, _) = head
            .forward(&VectorFeature::random(3, 2, &mut rng), &random_mat(3, 2, &mut rng))
            .unwrap();
        for i in 0..3 {
            assert_eq!(y.at(i, 0), [1.0, 2.0, 3.0]);
            assert_eq!(y.at(i, 1), [4.0, 5.0, 6.0]);
        }
    }

    #[test]
    fn kp_head_appearance_path_is_isolated_when_equivariant_input_is_zero() {
        let mut rng = seeded_rng(5);
        let mut head = KpHead::init(2, 3, 6, 1, &mut rng);
        let zeros = VectorFeature::zeros(1, 2);
        let app = Mat::from_vec(1, 3, vec![0.2, 0.3, 0.4]).unwrap();
        let app2 = Mat::from_vec(1, 3, vec![0.4, 0.6, 0.8]).unwrap();
        head.mlp.fc1.bias.value.iter_mut().for_each(|b| *b = 0.0);
        head.mlp.fc2.bias.value.iter_mut().for_each(|b| *b = 0.0);
        let (y1, _) = head.forward(&zeros, &app).unwrap();
        let (y2, _) = head.forward(&zeros, &app2).unwrap();
        // with zero biases the head is positively homogeneous in the appearance input
        for (a, b) in y1.data.iter().zip(&y2.data) {
            assert!((2.0 * a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = seeded_rng(6);
        let head = SegHead::init(4, 3, 8, 2, &mut rng);
        assert!(head.forward(&Mat::zeros(3, 4), &Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let m = Mat::from_vec(2, 3, vec![1.0, 1.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_labels(&m), vec![0, 1]);
    }
}
