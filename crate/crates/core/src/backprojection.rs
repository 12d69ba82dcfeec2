//! Depth image to camera-frame point cloud, and the inverse projection.
//!
//! Pixel `(x, y)` is the zero-based (column, row) index of a pixel centre.
//! A valid pixel with depth `d` maps to `d · K⁻¹ · [x, y, 1]ᵀ`.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, Gray16, IoError, PlyTable};
use crate::linalg::Mat;

#[derive(Debug, Error)]
pub enum BackprojectionError {
    #[error("singular intrinsics: |det K| = {0:e}")]
    SingularIntrinsics(f64),
    #[error("point {index} has non-positive depth {z}")]
    NonPositiveDepth { index: usize, z: f64 },
    #[error("invalid depth image: {0}")]
    InvalidDepth(String),
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// `K = [[fx, skew, cx], [0, fy, cy], [0, 0, 1]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
}

impl CameraIntrinsics {
    pub fn from_matrix(k: Matrix3<f64>) -> Result<Self, BackprojectionError> {
        let det = k.determinant();
        if !(det.abs() > 1e-12) || !k.iter().all(|v| v.is_finite()) {
            return Err(BackprojectionError::SingularIntrinsics(det));
        }
        let k_inv = k.try_inverse().ok_or(BackprojectionError::SingularIntrinsics(det))?;
        Ok(Self { k, k_inv })
    }

    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Result<Self, BackprojectionError> {
        Self::from_matrix(Matrix3::new(fx, skew, cx, 0.0, fy, cy, 0.0, 0.0, 1.0))
    }

    pub fn from_json(j: &IntrinsicsJson) -> Result<Self, BackprojectionError> {
        Self::new(j.fx, j.fy, j.cx, j.cy, j.skew)
    }

    pub fn to_json(&self) -> IntrinsicsJson {
        IntrinsicsJson {
            fx: self.k[(0, 0)],
            fy: self.k[(1, 1)],
            cx: self.k[(0, 2)],
            cy: self.k[(1, 2)],
            skew: self.k[(0, 1)],
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackprojectionError> {
        Self::from_json(&io::read_json(path)?)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn inverse(&self) -> &Matrix3<f64> {
        &self.k_inv
    }
}

/// Row-major depth in meters; zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, BackprojectionError> {
        if data.len() != width * height {
            return Err(BackprojectionError::InvalidDepth(format!(
                "{} samples for {width}×{height}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(BackprojectionError::InvalidDepth(format!("depth value {bad}")));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Converts sensor ticks with `ticks_per_meter` (e.g. 10000).
    pub fn from_gray16(img: &Gray16, ticks_per_meter: f64) -> Result<Self, BackprojectionError> {
        if !(ticks_per_meter > 0.0) {
            return Err(BackprojectionError::InvalidDepth(format!(
                "depth scale {ticks_per_meter} must be positive"
            )));
        }
        Self::new(
            img.width,
            img.height,
            img.data.iter().map(|&t| t as f64 / ticks_per_meter).collect(),
        )
    }

    pub fn load_pgm(path: &Path, ticks_per_meter: f64) -> Result<Self, BackprojectionError> {
        let img = io::parse_pgm(&std::fs::read(path).map_err(IoError::from)?)?;
        Self::from_gray16(&img, ticks_per_meter)
    }
}

/// Camera-frame points with optional per-point attributes and pixel origins.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// `N × A`, e.g. RGB in `[0, 1]`.
    pub attributes: Option<Mat>,
    pub pixel_origin: Option<Vec<[u32; 2]>>,
}

impl PointCloud {
    pub fn new(
        points: Vec<Vector3<f64>>,
        attributes: Option<Mat>,
        pixel_origin: Option<Vec<[u32; 2]>>,
    ) -> Result<Self, BackprojectionError> {
        let n = points.len();
        if let Some(a) = &attributes {
            if a.rows != n {
                return Err(BackprojectionError::InvalidCloud(format!(
                    "{} attribute rows for {n} points",
                    a.rows
                )));
            }
        }
        if let Some(p) = &pixel_origin {
            if p.len() != n {
                return Err(BackprojectionError::InvalidCloud(format!(
                    "{} pixel origins for {n} points",
                    p.len()
                )));
            }
        }
        Ok(Self {
            points,
            attributes,
            pixel_origin,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `x, y, z` plus `red, green, blue` when three attributes are present.
    pub fn to_ply_table(&self) -> PlyTable {
        let rgb = self.attributes.as_ref().filter(|a| a.cols == 3);
        let mut props: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        if rgb.is_some() {
            props.extend(["red", "green", "blue"].iter().map(|s| s.to_string()));
        }
        let mut t = PlyTable::new(props);
        for (i, p) in self.points.iter().enumerate() {
            let mut row = vec![p.x, p.y, p.z];
            if let Some(a) = rgb {
                row.extend_from_slice(a.row(i));
            }
            t.push(row);
        }
        t
    }
}

/// Back-projects every valid pixel, or only those in `mask` when given.
pub fn depth_to_cloud(depth: &DepthImage, k: &CameraIntrinsics, mask: Option<&[(usize, usize)]>) -> PointCloud {
    let k_inv = k.inverse();
    let mut points = Vec::new();
    let mut origin = Vec::new();
    let mut emit = |x: usize, y: usize| {
        let d = depth.get(x, y);
        if d > 0.0 {
            let ray = k_inv * Vector3::new(x as f64, y as f64, 1.0);
            points.push(ray * d);
            origin.push([x as u32, y as u32]);
        }
    };
    match mask {
        Some(pixels) => {
            for &(x, y) in pixels {
                if x < depth.width && y < depth.height {
                    emit(x, y);
                }
            }
        }
        None => {
            for y in 0..depth.height {
                for x in 0..depth.width {
                    emit(x, y);
                }
            }
        }
    }
    PointCloud {
        points,
        attributes: None,
        pixel_origin: Some(origin),
    }
}

/// `(u/w, v/w, w)` with `(u, v, w) = K·p` for every point.
pub fn project_to_pixels(
    cloud: &PointCloud,
    k: &CameraIntrinsics,
) -> Result<Vec<(f64, f64, f64)>, BackprojectionError> {
    cloud
        .points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if !(p.z > 0.0) {
                return Err(BackprojectionError::NonPositiveDepth { index, z: p.z });
            }
            let h = k.matrix() * p;
            Ok((h.x / h.z, h.y / h.z, h.z))
        })
        .collect()
}
