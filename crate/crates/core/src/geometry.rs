//! Rotation and rigid-transform algebra plus the weighted rigid least-squares fit.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating that a matrix is a proper rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Ratio of the second to the first singular value of the centered
/// cross-covariance below which the fit is treated as rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not a proper rotation (orthonormality residual {residual:e}, det {det})")]
    NotARotation { residual: f64, det: f64 },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("invalid correspondences: {0}")]
    InvalidCorrespondences(String),
}

/// A proper 3D rotation, `mᵀm = I` and `det m = +1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates `m` against the rotation invariants.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let residual = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if residual > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::NotARotation { residual, det });
        }
        Ok(Self(m))
    }

    /// Wraps a matrix the caller has constructed to be orthonormal.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    /// Rotation by `angle` radians about `axis` (normalised internally).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let a = axis / n;
        let (s, c) = angle.sin_cos();
        let k = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
        Self(Matrix3::identity() + k * s + k * k * (1.0 - c))
    }

    /// Rotation from a (not necessarily normalised) quaternion `w + xi + yj + zk`.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        Self(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    /// `self · other`: applies `other` first.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    /// Max-abs entry of `mᵀm − I`.
    pub fn orthonormality_residual(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).abs().max()
    }
}

/// Uniform (Haar) rotation from a normalised 4D Gaussian quaternion.
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if n2 > 1e-12 {
            return Rotation::from_quaternion(q[0], q[1], q[2], q[3]);
        }
    }
}

/// Angle of the relative rotation `aᵀb`, in `[0, π]`.
///
/// Evaluated as `atan2(sin θ, cos θ)` with `cos θ = (tr(aᵀb) − 1)/2` and
/// `sin θ` from the skew part of `aᵀb`, which equals the clamped arccos form
/// but keeps full precision for small angles.
pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    let m = a.0.transpose() * b.0;
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sx = m[(2, 1)] - m[(1, 2)];
    let sy = m[(0, 2)] - m[(2, 0)];
    let sz = m[(1, 0)] - m[(0, 1)];
    let sin = 0.5 * (sx * sx + sy * sy + sz * sz).sqrt();
    sin.atan2(cos)
}

/// Rigid transform `x ↦ R·x + t`, mapping object frame to camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(x) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(r_inv, -r_inv.apply(&self.translation))
    }
}

/// `compose(a, b).apply(x) == a.apply(b.apply(x))`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform::new(
        a.rotation.compose(&b.rotation),
        a.rotation.apply(&b.translation) + a.translation,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseJson {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for PoseJson {
    fn from(t: &RigidTransform) -> Self {
        Self {
            rotation: t.rotation.rows(),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<&PoseJson> for RigidTransform {
    type Error = GeometryError;

    fn try_from(p: &PoseJson) -> Result<Self, Self::Error> {
        Ok(RigidTransform::new(
            Rotation::from_rows(p.rotation)?,
            Vector3::from(p.translation),
        ))
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let p = PoseJson::deserialize(d)?;
        RigidTransform::try_from(&p).map_err(serde::de::Error::custom)
    }
}

/// Paired object-frame / camera-frame points with non-negative weights.
#[derive(Debug, Clone)]
pub struct Correspondences {
    source: Vec<Vector3<f64>>,
    target: Vec<Vector3<f64>>,
    weights: Vec<f64>,
}

impl Correspondences {
    pub fn new(
        source: Vec<Vector3<f64>>,
        target: Vec<Vector3<f64>>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self, GeometryError> {
        if source.len() != target.len() {
            return Err(GeometryError::InvalidCorrespondences(format!(
                "source has {} points, target has {}",
                source.len(),
                target.len()
            )));
        }
        if source.len() < 3 {
            return Err(GeometryError::DegenerateConfiguration(format!(
                "need at least 3 correspondences, got {}",
                source.len()
            )));
        }
        let weights = weights.unwrap_or_else(|| vec![1.0; source.len()]);
        if weights.len() != source.len() {
            return Err(GeometryError::InvalidCorrespondences(format!(
                "{} weights for {} points",
                weights.len(),
                source.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GeometryError::InvalidCorrespondences(
                "weights must be finite and non-negative".into(),
            ));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(GeometryError::InvalidCorrespondences("weights sum to zero".into()));
        }
        let finite = |p: &Vector3<f64>| p.iter().all(|v| v.is_finite());
        if !source.iter().all(finite) || !target.iter().all(finite) {
            return Err(GeometryError::InvalidCorrespondences("non-finite coordinates".into()));
        }
        Ok(Self {
            source,
            target,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source(&self) -> &[Vector3<f64>] {
        &self.source
    }

    pub fn target(&self) -> &[Vector3<f64>] {
        &self.target
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Weighted least-squares rigid alignment (Kabsch/Umeyama without scale).
///
/// Minimises `Σ wᵢ‖R·srcᵢ + t − dstᵢ‖²`. When the SVD of the cross-covariance
/// would produce a reflection, the singular vector paired with the smallest
/// singular value is flipped so the result is always a proper rotation.
pub fn fit_rigid_least_squares(c: &Correspondences) -> Result<RigidTransform, GeometryError> {
    let w_sum: f64 = c.weights.iter().sum();
    let mut src_mean = Vector3::zeros();
    let mut dst_mean = Vector3::zeros();
    for ((s, d), w) in c.source.iter().zip(&c.target).zip(&c.weights) {
        src_mean += s * *w;
        dst_mean += d * *w;
    }
    src_mean /= w_sum;
    dst_mean /= w_sum;

    // H = Σ w (src − s̄)(dst − d̄)ᵀ
    let mut h = Matrix3::zeros();
    for ((s, d), w) in c.source.iter().zip(&c.target).zip(&c.weights) {
        h += (s - src_mean) * (d - dst_mean).transpose() * *w;
    }

    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => {
            return Err(GeometryError::DegenerateConfiguration(
                "SVD of cross-covariance failed".into(),
            ))
        }
    };
    let mut sv: Vec<(f64, usize)> = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (s_max, s_mid) = (sv[0].0, sv[1].0);
    if !(s_max > 0.0) || s_mid <= RANK_TOLERANCE * s_max {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "cross-covariance rank < 2 (singular values {:e}, {:e})",
            s_max, s_mid
        )));
    }
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(sv[2].1, sv[2].1)] = -1.0;
    }
    let r = v * d * u.transpose();
    let rotation = Rotation::from_matrix_unchecked(r);
    let translation = dst_mean - rotation.apply(&src_mean);
    Ok(RigidTransform::new(rotation, translation))
}
