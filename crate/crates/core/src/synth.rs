//! Synthetic object models, keypoint selection and labelled scenes.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backprojection::{project_to_pixels, BackprojectionError, CameraIntrinsics, PointCloud};
use crate::geometry::{sample_uniform_rotation, RigidTransform};
use crate::heads::OffsetField;
use crate::io::{self, IoError, PlyTable};
use crate::linalg::Mat;
use crate::pipeline::{ModelRegistry, ObjectModel, PipelineError};
use crate::seeded_rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least {needed} vertices, have {have}")]
    TooFewVertices { needed: usize, have: usize },
    #[error("invalid scene config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Backprojection(#[from] BackprojectionError),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub const MIN_VERTICES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    Box {
        extents: [f64; 3],
    },
    Cylinder {
        radius: f64,
        height: f64,
    },
    /// Sphere of the given mean radius with a smooth random radial bump field.
    Blob {
        radius: f64,
    },
}

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Box { .. } => "box",
            ShapeKind::Cylinder { .. } => "cylinder",
            ShapeKind::Blob { .. } => "blob",
        }
    }

    /// Cylinders are treated as symmetric at evaluation.
    pub fn is_symmetric(&self) -> bool {
        matches!(self, ShapeKind::Cylinder { .. })
    }
}

fn unit_sphere_point(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v: Vector3<f64> = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn box_surface(extents: [f64; 3], n: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    let h = Vector3::from(extents) * 0.5;
    let mut out: Vec<Vector3<f64>> = (0..8)
        .map(|c| {
            Vector3::new(
                if c & 1 == 0 { -h.x } else { h.x },
                if c & 2 == 0 { -h.y } else { h.y },
                if c & 4 == 0 { -h.z } else { h.z },
            )
        })
        .collect();
    let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
    let total: f64 = areas.iter().sum();
    while out.len() < n {
        // face normal axis chosen by area, then a random sign
        let mut u = rng.random_range(0.0..total);
        let mut axis = 0;
        while axis < 2 && u >= areas[axis] {
            u -= areas[axis];
            axis += 1;
        }
        let mut p = Vector3::new(
            rng.random_range(-h.x..=h.x),
            rng.random_range(-h.y..=h.y),
            rng.random_range(-h.z..=h.z),
        );
        p[axis] = if rng.random_bool(0.5) { h[axis] } else { -h[axis] };
        out.push(p);
    }
    out.truncate(n.max(8));
    out
}

fn cylinder_surface(radius: f64, height: f64, n: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    let side = 2.0 * PI * radius * height;
    let cap = PI * radius * radius;
    let total = side + 2.0 * cap;
    (0..n)
        .map(|_| {
            let u = rng.random_range(0.0..total);
            let theta = rng.random_range(0.0..2.0 * PI);
            if u < side {
                let z = rng.random_range(-height / 2.0..=height / 2.0);
                Vector3::new(radius * theta.cos(), radius * theta.sin(), z)
            } else {
                let r = radius * rng.random_range(0.0f64..=1.0).sqrt();
                let z = if u < side + cap { height / 2.0 } else { -height / 2.0 };
                Vector3::new(r * theta.cos(), r * theta.sin(), z)
            }
        })
        .collect()
}

fn blob_surface(radius: f64, n: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    // four low-frequency bumps; amplitude keeps the surface star-shaped
    let bumps: Vec<(Vector3<f64>, f64)> = (0..4)
        .map(|_| (unit_sphere_point(rng), rng.random_range(-0.25..0.25)))
        .collect();
    (0..n)
        .map(|_| {
            let d = unit_sphere_point(rng);
            let r = 1.0
                + bumps
                    .iter()
                    .map(|(c, a)| a * (-(1.0 - d.dot(c)) * 4.0).exp())
                    .sum::<f64>();
            d * (radius * r)
        })
        .collect()
}

/// Per-vertex colour from normalised object coordinates.
fn coordinate_colors(vertices: &[Vector3<f64>]) -> Vec<[f64; 3]> {
    let half = vertices.iter().map(|v| v.abs().max()).fold(1e-12, f64::max);
    vertices
        .iter()
        .map(|v| {
            [
                0.5 + 0.45 * v.x / half,
                0.5 + 0.45 * v.y / half,
                0.5 + 0.45 * v.z / half,
            ]
        })
        .collect()
}

/// Farthest point sampling seeded at the vertex farthest from the centroid.
/// Ties resolve to the lowest index.
pub fn farthest_point_sampling(points: &[Vector3<f64>], m: usize) -> Vec<usize> {
    if points.is_empty() || m == 0 {
        return Vec::new();
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let argmax = |d: &[f64]| {
        let mut best = 0;
        for (i, &v) in d.iter().enumerate() {
            if v > d[best] {
                best = i;
            }
        }
        best
    };
    let first = argmax(&points.iter().map(|p| (p - centroid).norm_squared()).collect::<Vec<_>>());
    fps_from(points, first, m.min(points.len()))
}

/// Farthest point sampling from a fixed first index.
pub fn fps_from(points: &[Vector3<f64>], first: usize, m: usize) -> Vec<usize> {
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while chosen.len() < m {
        let mut best = 0;
        for (i, &v) in dist.iter().enumerate() {
            if v > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - points[best]).norm_squared());
        }
    }
    chosen
}

pub fn select_keypoints(vertices: &[Vector3<f64>], m: usize) -> Result<Vec<Vector3<f64>>, SynthError> {
    if m < 3 || m > vertices.len() {
        return Err(SynthError::TooFewVertices {
            needed: m.max(3),
            have: vertices.len(),
        });
    }
    Ok(farthest_point_sampling(vertices, m)
        .into_iter()
        .map(|i| vertices[i])
        .collect())
}

/// Surface-sampled model with coordinate colours and FPS keypoints; the
/// centre is the vertex centroid.
pub fn generate_object(
    class_id: usize,
    kind: ShapeKind,
    n_vertices: usize,
    num_keypoints: usize,
    seed: u64,
) -> Result<ObjectModel, SynthError> {
    if n_vertices < MIN_VERTICES {
        return Err(SynthError::TooFewVertices {
            needed: MIN_VERTICES,
            have: n_vertices,
        });
    }
    let mut rng = seeded_rng(seed);
    let vertices = match kind {
        ShapeKind::Box { extents } => box_surface(extents, n_vertices, &mut rng),
        ShapeKind::Cylinder { radius, height } => cylinder_surface(radius, height, n_vertices, &mut rng),
        ShapeKind::Blob { radius } => blob_surface(radius, n_vertices, &mut rng),
    };
    let keypoints = select_keypoints(&vertices, num_keypoints)?;
    let center = vertices.iter().sum::<Vector3<f64>>() / vertices.len() as f64;
    let colors = coordinate_colors(&vertices);
    Ok(ObjectModel::new(
        class_id,
        kind.name(),
        vertices,
        Some(colors),
        keypoints,
        center,
    )?)
}

/// The three toy kinds, class ids 1..=3.
pub fn default_kinds() -> Vec<ShapeKind> {
    vec![
        ShapeKind::Box {
            extents: [0.08, 0.12, 0.16],
        },
        ShapeKind::Cylinder {
            radius: 0.04,
            height: 0.14,
        },
        ShapeKind::Blob { radius: 0.06 },
    ]
}

pub fn default_registry(n_vertices: usize, num_keypoints: usize, seed: u64) -> Result<ModelRegistry, SynthError> {
    let mut reg = ModelRegistry::default();
    for (i, kind) in default_kinds().into_iter().enumerate() {
        let model = generate_object(i + 1, kind, n_vertices, num_keypoints, seed.wrapping_add(i as u64))?;
        reg.insert(model, kind.is_symmetric());
    }
    Ok(reg)
}

/// Default camera used to assign pixel origins.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(572.4, 573.6, 320.0, 240.0, 0.0).expect("valid intrinsics")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Fixed object poses; random when absent.
    #[serde(default)]
    pub poses: Option<Vec<RigidTransform>>,
    pub noise_sigma: f64,
    /// Fraction of each object's vertices removed.
    pub occlusion: f64,
    /// When set, each object draws its fraction uniformly from
    /// `[occlusion_min, occlusion]`.
    #[serde(default)]
    pub occlusion_min: Option<f64>,
    pub background_points: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            poses: None,
            noise_sigma: 0.0,
            occlusion: 0.0,
            occlusion_min: None,
            background_points: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self, n_objects: usize) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::ConfigInvalid(m));
        if !(0.0..=0.9).contains(&self.occlusion) {
            return bad(format!("occlusion {} outside [0, 0.9]", self.occlusion));
        }
        if let Some(lo) = self.occlusion_min {
            if !(0.0..=self.occlusion).contains(&lo) {
                return bad(format!("occlusion_min {lo} outside [0, {}]", self.occlusion));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        if let Some(p) = &self.poses {
            if p.len() != n_objects {
                return bad(format!("{} poses for {n_objects} objects", p.len()));
            }
            if let Some(t) = p.iter().find(|t| !(t.translation.z > 0.0)) {
                return bad(format!("object behind the camera at {:?}", t.translation));
            }
        }
        if n_objects == 0 {
            return bad("no objects".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtPose {
    pub class_id: usize,
    pub pose: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub cloud: PointCloud,
    pub labels: Vec<usize>,
    /// Instance index into `gt_poses`, `None` for background.
    pub instances: Vec<Option<usize>>,
    /// Channels `0..M` keypoints, channel `M` the centre; zero on background.
    pub gt_offsets: OffsetField,
    pub gt_poses: Vec<GtPose>,
    pub scene_seed: u64,
    pub config: SceneConfig,
}

/// Contiguous angular sector about the view axis through `center`, as a
/// set of `count` indices.
fn occluded_sector(points: &[Vector3<f64>], center: &Vector3<f64>, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if count == 0 || points.is_empty() {
        return Vec::new();
    }
    let axis = center.normalize();
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = axis.cross(&helper).normalize();
    let e2 = axis.cross(&e1);
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = p - center;
            (d.dot(&e2).atan2(d.dot(&e1)), i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let start = rng.random_range(0..order.len());
    (0..count.min(order.len()))
        .map(|k| order[(start + k) % order.len()].1)
        .collect()
}

fn random_pose(rng: &mut impl Rng) -> RigidTransform {
    let r = sample_uniform_rotation(rng);
    let t = Vector3::new(
        rng.random_range(-0.15..=0.15),
        rng.random_range(-0.15..=0.15),
        rng.random_range(0.6..=1.0),
    );
    RigidTransform::new(r, t)
}

/// Places every object, removes an occluded sector per object, computes
/// offsets and then adds noise, and appends background clutter.
pub fn render_scene(objects: &[&ObjectModel], config: &SceneConfig, seed: u64) -> Result<SceneSample, SynthError> {
    config.validate(objects.len())?;
    let m = objects[0].keypoints.len();
    if let Some(o) = objects.iter().find(|o| o.keypoints.len() != m) {
        return Err(SynthError::ConfigInvalid(format!(
            "{} has {} keypoints, expected {m}",
            o.name,
            o.keypoints.len()
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut points = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut labels = Vec::new();
    let mut instances = Vec::new();
    let mut offsets: Vec<[f64; 3]> = Vec::new();
    let mut gt_poses = Vec::new();
    for (inst, obj) in objects.iter().enumerate() {
        let pose = match &config.poses {
            Some(p) => p[inst],
            None => random_pose(&mut rng),
        };
        let placed: Vec<Vector3<f64>> = obj.vertices.iter().map(|v| pose.apply(v)).collect();
        let center = pose.apply(&obj.center);
        let occlusion = match config.occlusion_min {
            Some(lo) if lo < config.occlusion => rng.random_range(lo..=config.occlusion),
            _ => config.occlusion,
        };
        let drop_count = (occlusion * placed.len() as f64).round() as usize;
        let mut keep = vec![true; placed.len()];
        for i in occluded_sector(&placed, &center, drop_count, &mut rng) {
            keep[i] = false;
        }
        let targets: Vec<Vector3<f64>> = obj
            .keypoints
            .iter()
            .map(|k| pose.apply(k))
            .chain(std::iter::once(center))
            .collect();
        for (i, p) in placed.iter().enumerate().filter(|(i, _)| keep[*i]) {
            points.push(*p);
            colors.push(obj.colors.as_ref().map_or([0.5; 3], |c| c[i]));
            labels.push(obj.class_id);
            instances.push(Some(inst));
            for t in &targets {
                let d = t - p;
                offsets.push([d.x, d.y, d.z]);
            }
        }
        gt_poses.push(GtPose {
            class_id: obj.class_id,
            pose,
        });
    }
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("finite sigma");
        for p in &mut points {
            *p += Vector3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            );
        }
    }
    for _ in 0..config.background_points {
        points.push(Vector3::new(
            rng.random_range(-0.35..=0.35),
            rng.random_range(-0.3..=0.3),
            rng.random_range(0.45..=1.15),
        ));
        colors.push([
            rng.random_range(0.0..=1.0),
            rng.random_range(0.0..=1.0),
            rng.random_range(0.0..=1.0),
        ]);
        labels.push(0);
        instances.push(None);
        offsets.extend(std::iter::repeat_n([0.0; 3], m + 1));
    }
    let n = points.len();
    let attrs = Mat::from_vec(n, 3, colors.into_iter().flatten().collect()).expect("n × 3");
    let mut cloud = PointCloud::new(points, Some(attrs), None)?;
    let k = default_intrinsics();
    let px = project_to_pixels(&cloud, &k)?;
    cloud.pixel_origin = Some(
        px.iter()
            .map(|&(u, v, _)| [u.round().clamp(0.0, 639.0) as u32, v.round().clamp(0.0, 479.0) as u32])
            .collect(),
    );
    Ok(SceneSample {
        cloud,
        labels,
        instances,
        gt_offsets: OffsetField::from_vec(n, m + 1, offsets.into_iter().flatten().collect()).expect("n × (m + 1)"),
        gt_poses,
        scene_seed: seed,
        config: config.clone(),
    })
}

/// Largest `|pᵢ + offsetᵢⱼ − (R·kpⱼ + t)|` over foreground points.
pub fn offset_consistency_residual(sample: &SceneSample, registry: &ModelRegistry) -> Result<f64, SynthError> {
    let mut worst = 0.0f64;
    for (i, inst) in sample.instances.iter().enumerate() {
        let Some(inst) = inst else { continue };
        let gt = &sample.gt_poses[*inst];
        let model = registry.get(gt.class_id)?;
        let targets = model.keypoints.iter().chain(std::iter::once(&model.center));
        for (j, k) in targets.enumerate() {
            let vote = sample.cloud.points[i] + Vector3::from(sample.gt_offsets.at(i, j));
            worst = worst.max((vote - gt.pose.apply(k)).amax());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneSidecar {
    scene_seed: u64,
    num_keypoints: usize,
    gt_poses: Vec<GtPose>,
    config: SceneConfig,
}

impl SceneSample {
    pub fn num_keypoints(&self) -> usize {
        self.gt_offsets.c - 1
    }

    fn to_table(&self) -> PlyTable {
        let m = self.gt_offsets.c;
        let mut props: Vec<String> = ["x", "y", "z", "red", "green", "blue", "px", "py", "label", "instance"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for j in 0..m {
            for a in ["x", "y", "z"] {
                props.push(format!("off_{j}_{a}"));
            }
        }
        let mut t = PlyTable::new(props);
        let attrs = self.cloud.attributes.as_ref();
        let px = self.cloud.pixel_origin.as_ref();
        for (i, p) in self.cloud.points.iter().enumerate() {
            let mut row = vec![p.x, p.y, p.z];
            row.extend_from_slice(attrs.map_or(&[0.5; 3][..], |a| &a.row(i)[..3]));
            let o = px.map_or([0, 0], |v| v[i]);
            row.extend([o[0] as f64, o[1] as f64, self.labels[i] as f64]);
            row.push(self.instances[i].map_or(-1.0, |k| k as f64));
            for j in 0..m {
                row.extend(self.gt_offsets.at(i, j));
            }
            t.push(row);
        }
        t
    }

    /// `<stem>.ply` with points, colours, pixels, labels and offsets, plus a
    /// `<stem>.json` sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), SynthError> {
        let t = self.to_table();
        t.write(
            &dir.join(format!("{stem}.ply")),
            &[format!("scene_seed {}", self.scene_seed)],
        )?;
        let side = SceneSidecar {
            scene_seed: self.scene_seed,
            num_keypoints: self.num_keypoints(),
            gt_poses: self.gt_poses.clone(),
            config: self.config.clone(),
        };
        io::write_json_atomic(&dir.join(format!("{stem}.json")), &side)?;
        Ok(())
    }

    pub fn load(ply: &Path) -> Result<Self, SynthError> {
        let side: SceneSidecar = io::read_json(&ply.with_extension("json"))?;
        let t = PlyTable::read(ply)?;
        let col = |name: &str| t.require(name);
        let (x, y, z) = (col("x")?, col("y")?, col("z")?);
        let (r, g, b) = (col("red")?, col("green")?, col("blue")?);
        let (pxc, pyc, lc, ic) = (col("px")?, col("py")?, col("label")?, col("instance")?);
        let m = side.num_keypoints + 1;
        let off_cols: Vec<usize> = (0..m)
            .flat_map(|j| ["x", "y", "z"].map(|a| format!("off_{j}_{a}")))
            .map(|name| col(&name))
            .collect::<Result<_, _>>()?;
        let n = t.rows.len();
        let mut points = Vec::with_capacity(n);
        let mut attrs = Vec::with_capacity(3 * n);
        let mut px = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut instances = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(3 * m * n);
        for row in &t.rows {
            points.push(Vector3::new(row[x], row[y], row[z]));
            attrs.extend([row[r], row[g], row[b]]);
            px.push([row[pxc] as u32, row[pyc] as u32]);
            if !(row[lc] >= 0.0 && row[lc].fract() == 0.0) {
                return Err(IoError::Parse(format!("bad label {}", row[lc])).into());
            }
            labels.push(row[lc] as usize);
            instances.push((row[ic] >= 0.0).then(|| row[ic] as usize));
            offsets.extend(off_cols.iter().map(|&c| row[c]));
        }
        if let Some(bad) = instances.iter().flatten().find(|&&k| k >= side.gt_poses.len()) {
            return Err(IoError::Parse(format!("instance {bad} has no pose")).into());
        }
        let cloud = PointCloud::new(points, Some(Mat::from_vec(n, 3, attrs).expect("n × 3")), Some(px))?;
        Ok(Self {
            cloud,
            labels,
            instances,
            gt_offsets: OffsetField::from_vec(n, m, offsets).expect("n × m"),
            gt_poses: side.gt_poses,
            scene_seed: side.scene_seed,
            config: side.config,
        })
    }
}

/// Per-scene seed derived from the dataset seed.
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    dataset_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// One random registry object per scene.
pub fn generate_scenes(
    registry: &ModelRegistry,
    config: &SceneConfig,
    count: usize,
    dataset_seed: u64,
) -> Result<Vec<SceneSample>, SynthError> {
    let models: Vec<&ObjectModel> = registry.models.values().collect();
    if models.is_empty() {
        return Err(SynthError::ConfigInvalid("empty registry".into()));
    }
    (0..count)
        .map(|i| {
            let seed = scene_seed(dataset_seed, i);
            let mut rng = seeded_rng(seed ^ 0x5CE7E);
            let obj = models[rng.random_range(0..models.len())];
            render_scene(&[obj], config, seed)
        })
        .collect()
}

pub fn scene_stem(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Scene PLY files in a directory, sorted by name.
pub fn list_scenes(dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(IoError::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "ply")
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("scene_"))
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn load_scenes(dir: &Path) -> Result<Vec<SceneSample>, SynthError> {
    list_scenes(dir)?.iter().map(|p| SceneSample::load(p)).collect()
}
