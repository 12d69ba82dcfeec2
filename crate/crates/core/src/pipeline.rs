//! Second stage: per-point labels and offsets to instances, voted keypoints
//! and fitted poses.
//!
//! Points of one class are split into instances by mean-shift over their
//! centre votes. Within an instance every keypoint is voted by mean-shift over
//! `point + offset` candidates, and the pose is the rigid least-squares fit
//! from model keypoints to voted keypoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backprojection::PointCloud;
use crate::geometry::{fit_rigid_least_squares, Correspondences, GeometryError, PoseJson, RigidTransform};
use crate::heads::{argmax_labels, OffsetField};
use crate::io::{self, IoError, PlyTable};
use crate::network::{Network, NetworkError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("unknown class id {0}")]
    RegistryMiss(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// An object model in its own frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub class_id: usize,
    pub name: String,
    pub vertices: Vec<Vector3<f64>>,
    /// Per-vertex RGB in `[0, 1]`, when known.
    pub colors: Option<Vec<[f64; 3]>>,
    pub keypoints: Vec<Vector3<f64>>,
    pub center: Vector3<f64>,
    /// Maximum pairwise vertex distance.
    pub diameter: f64,
}

/// Exact maximum pairwise distance, `O(m²)`.
pub fn model_diameter(vertices: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in vertices.iter().enumerate() {
        for b in &vertices[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

impl ObjectModel {
    pub fn new(
        class_id: usize,
        name: &str,
        vertices: Vec<Vector3<f64>>,
        colors: Option<Vec<[f64; 3]>>,
        keypoints: Vec<Vector3<f64>>,
        center: Vector3<f64>,
    ) -> Result<Self, PipelineError> {
        if let Some(c) = &colors {
            if c.len() != vertices.len() {
                return Err(PipelineError::InvalidModel(format!(
                    "{} colours for {} vertices",
                    c.len(),
                    vertices.len()
                )));
            }
        }
        let diameter = model_diameter(&vertices);
        let model = Self {
            class_id,
            name: name.to_string(),
            vertices,
            colors,
            keypoints,
            center,
            diameter,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.diameter > 0.0) {
            return Err(PipelineError::InvalidModel(format!("{}: zero diameter", self.name)));
        }
        if self.keypoints.len() < 3 {
            return Err(PipelineError::InvalidModel(format!(
                "{}: {} keypoints, need at least 3",
                self.name,
                self.keypoints.len()
            )));
        }
        // bounding sphere about the vertex centroid
        let centroid = self.vertices.iter().sum::<Vector3<f64>>() / self.vertices.len() as f64;
        let radius = self.vertices.iter().map(|v| (v - centroid).norm()).fold(0.0, f64::max);
        if let Some(k) = self
            .keypoints
            .iter()
            .find(|k| (*k - centroid).norm() > radius * (1.0 + 1e-9))
        {
            return Err(PipelineError::InvalidModel(format!(
                "{}: keypoint {k:?} outside the vertex bounding sphere",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelSidecar {
    class_id: usize,
    name: String,
    keypoints: Vec<[f64; 3]>,
    center: [f64; 3],
    #[serde(default)]
    symmetric: bool,
}

/// Object models by class id, plus the set treated as symmetric at evaluation.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    pub models: BTreeMap<usize, ObjectModel>,
    pub symmetric: std::collections::BTreeSet<usize>,
}

impl ModelRegistry {
    pub fn insert(&mut self, model: ObjectModel, symmetric: bool) {
        if symmetric {
            self.symmetric.insert(model.class_id);
        } else {
            self.symmetric.remove(&model.class_id);
        }
        self.models.insert(model.class_id, model);
    }

    pub fn get(&self, class_id: usize) -> Result<&ObjectModel, PipelineError> {
        self.models.get(&class_id).ok_or(PipelineError::RegistryMiss(class_id))
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn is_symmetric(&self, class_id: usize) -> bool {
        self.symmetric.contains(&class_id)
    }

    /// Writes `<name>.ply` (vertices, colours) and `<name>.json` (class id,
    /// keypoints, centre, symmetry) per model.
    pub fn save_dir(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(IoError::from)?;
        for m in self.models.values() {
            let mut props: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
            if m.colors.is_some() {
                props.extend(["red", "green", "blue"].iter().map(|s| s.to_string()));
            }
            let mut t = PlyTable::new(props);
            for (i, v) in m.vertices.iter().enumerate() {
                let mut row = vec![v.x, v.y, v.z];
                if let Some(c) = &m.colors {
                    row.extend_from_slice(&c[i]);
                }
                t.push(row);
            }
            t.write(
                &dir.join(format!("{}.ply", m.name)),
                &[format!("class_id {}", m.class_id)],
            )?;
            let side = ModelSidecar {
                class_id: m.class_id,
                name: m.name.clone(),
                keypoints: m.keypoints.iter().map(|k| [k.x, k.y, k.z]).collect(),
                center: [m.center.x, m.center.y, m.center.z],
                symmetric: self.is_symmetric(m.class_id),
            };
            io::write_json_atomic(&dir.join(format!("{}.json", m.name)), &side)?;
        }
        Ok(())
    }

    /// Reads every `<name>.json` with a matching `<name>.ply`, in name order.
    pub fn load_dir(dir: &Path) -> Result<Self, PipelineError> {
        let mut names: Vec<_> = fs::read_dir(dir)
            .map_err(IoError::from)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        names.sort();
        let mut reg = ModelRegistry::default();
        for json in names {
            let side: ModelSidecar = io::read_json(&json)?;
            let table = PlyTable::read(&json.with_extension("ply"))?;
            let (x, y, z) = (table.require("x")?, table.require("y")?, table.require("z")?);
            let vertices = table.rows.iter().map(|r| Vector3::new(r[x], r[y], r[z])).collect();
            let colors = match (table.column("red"), table.column("green"), table.column("blue")) {
                (Some(r), Some(g), Some(b)) => Some(table.rows.iter().map(|row| [row[r], row[g], row[b]]).collect()),
                _ => None,
            };
            let model = ObjectModel::new(
                side.class_id,
                &side.name,
                vertices,
                colors,
                side.keypoints.into_iter().map(Vector3::from).collect(),
                Vector3::from(side.center),
            )?;
            reg.insert(model, side.symmetric);
        }
        if reg.is_empty() {
            return Err(PipelineError::InvalidModel(format!("no models in {}", dir.display())));
        }
        Ok(reg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftParams {
    pub bandwidth: f64,
    pub max_iterations: usize,
    /// Iteration stops once a seed moves less than this (meters).
    pub tolerance: f64,
    pub max_seeds: usize,
}

impl MeanShiftParams {
    pub fn with_bandwidth(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            max_iterations: 50,
            tolerance: 1e-6,
            max_seeds: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub position: Vector3<f64>,
    /// Candidates within one bandwidth of `position`.
    pub support: usize,
}

fn ball_mean(points: &[Vector3<f64>], at: &Vector3<f64>, h2: f64) -> Option<(Vector3<f64>, usize)> {
    let mut sum = Vector3::zeros();
    let mut count = 0;
    for p in points {
        if (p - at).norm_squared() <= h2 {
            sum += p;
            count += 1;
        }
    }
    (count > 0).then(|| (sum / count as f64, count))
}

/// Flat-kernel mean-shift. Modes are returned by decreasing support, ties
/// by seed order; modes within one bandwidth of a stronger mode are merged
/// into it.
pub fn mean_shift(points: &[Vector3<f64>], p: &MeanShiftParams) -> Vec<Mode> {
    if points.is_empty() {
        return Vec::new();
    }
    let h2 = p.bandwidth * p.bandwidth;
    let n_seeds = points.len().min(p.max_seeds.max(1));
    let mut converged: Vec<Mode> = Vec::with_capacity(n_seeds);
    for s in 0..n_seeds {
        let mut x = points[s * points.len() / n_seeds];
        let mut support = 0;
        for _ in 0..p.max_iterations {
            let Some((m, c)) = ball_mean(points, &x, h2) else { break };
            let shift = (m - x).norm();
            x = m;
            support = c;
            if shift < p.tolerance {
                break;
            }
        }
        converged.push(Mode { position: x, support });
    }
    // stable sort keeps seed order among equal support
    converged.sort_by_key(|m| std::cmp::Reverse(m.support));
    let mut modes: Vec<Mode> = Vec::new();
    for m in converged {
        if modes.iter().all(|k| (k.position - m.position).norm_squared() > h2) {
            modes.push(m);
        }
    }
    for m in &mut modes {
        m.support = points.iter().filter(|q| (*q - m.position).norm_squared() <= h2).count();
    }
    modes
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub center_shift: MeanShiftParams,
    pub keypoint_shift: MeanShiftParams,
    pub min_points: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            center_shift: MeanShiftParams::with_bandwidth(0.05),
            keypoint_shift: MeanShiftParams::with_bandwidth(0.02),
            min_points: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceGroup {
    pub class_id: usize,
    pub members: Vec<usize>,
}

/// Groups foreground points (label ≠ 0) by class, then splits each class by
/// mean-shift over centre votes. Points join the nearest mode within two
/// bandwidths; groups under `min_points` are dropped.
pub fn assign_instances(labels: &[usize], center_votes: &[Vector3<f64>], p: &PipelineParams) -> Vec<InstanceGroup> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            by_class.entry(l).or_default().push(i);
        }
    }
    let reach2 = (2.0 * p.center_shift.bandwidth).powi(2);
    let mut out = Vec::new();
    for (class_id, idx) in by_class {
        let votes: Vec<Vector3<f64>> = idx.iter().map(|&i| center_votes[i]).collect();
        let modes = mean_shift(&votes, &p.center_shift);
        let mut groups = vec![Vec::new(); modes.len()];
        for (k, v) in votes.iter().enumerate() {
            let best = modes
                .iter()
                .enumerate()
                .map(|(j, m)| (j, (m.position - v).norm_squared()))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, d2)) = best {
                if d2 <= reach2 {
                    groups[j].push(idx[k]);
                }
            }
        }
        out.extend(
            groups
                .into_iter()
                .filter(|g| g.len() >= p.min_points)
                .map(|members| InstanceGroup { class_id, members }),
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Votes {
    pub keypoints: Vec<Vector3<f64>>,
    pub center: Vector3<f64>,
    /// Mean over keypoints and centre of the fraction of candidates within
    /// one bandwidth of the chosen mode.
    pub inlier_fraction: f64,
}

/// Strongest mode of one candidate set and its inlier fraction.
pub fn vote_single(candidates: &[Vector3<f64>], p: &MeanShiftParams) -> Option<(Vector3<f64>, f64)> {
    let modes = mean_shift(candidates, p);
    let best = modes.first()?;
    let h2 = p.bandwidth * p.bandwidth;
    let (mean, support) = ball_mean(candidates, &best.position, h2).unwrap_or((best.position, 0));
    Some((mean, support as f64 / candidates.len() as f64))
}

/// Votes every offset channel over the instance `members`.
pub fn vote_keypoints(
    points: &[Vector3<f64>],
    offsets: &OffsetField,
    members: &[usize],
    p: &MeanShiftParams,
) -> Option<Votes> {
    if members.is_empty() {
        return None;
    }
    let channels = offsets.c;
    let mut positions = Vec::with_capacity(channels);
    let mut inliers = 0.0;
    for ch in 0..channels {
        let cands: Vec<Vector3<f64>> = members
            .iter()
            .map(|&i| points[i] + Vector3::from(offsets.at(i, ch)))
            .collect();
        let (pos, frac) = vote_single(&cands, p)?;
        positions.push(pos);
        inliers += frac;
    }
    let center = positions.pop().expect("at least one channel");
    Some(Votes {
        keypoints: positions,
        center,
        inlier_fraction: (inliers / channels as f64).clamp(0.0, 1.0),
    })
}

/// Rigid fit from model keypoints to voted keypoints.
pub fn estimate_pose(voted: &[Vector3<f64>], model: &ObjectModel) -> Result<RigidTransform, PipelineError> {
    if voted.len() != model.keypoints.len() {
        return Err(PipelineError::ShapeMismatch(format!(
            "{} voted keypoints for a model with {}",
            voted.len(),
            model.keypoints.len()
        )));
    }
    let c = Correspondences::new(model.keypoints.clone(), voted.to_vec(), None)?;
    Ok(fit_rigid_least_squares(&c)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceDetection {
    pub class_id: usize,
    pub point_indices: Vec<usize>,
    pub voted_keypoints: Vec<Vector3<f64>>,
    pub voted_center: Vector3<f64>,
    pub pose: RigidTransform,
    pub vote_inlier_fraction: f64,
}

#[derive(Debug)]
pub struct InstanceFailure {
    pub class_id: usize,
    pub members: usize,
    pub error: PipelineError,
}

#[derive(Debug, Default)]
pub struct PipelineOutput {
    pub detections: Vec<InstanceDetection>,
    pub failures: Vec<InstanceFailure>,
}

/// Instance assignment, voting and fitting from given labels and offsets.
pub fn second_stage(
    points: &[Vector3<f64>],
    labels: &[usize],
    offsets: &OffsetField,
    registry: &ModelRegistry,
    p: &PipelineParams,
) -> Result<PipelineOutput, PipelineError> {
    if labels.len() != points.len() || offsets.n != points.len() {
        return Err(PipelineError::ShapeMismatch(format!(
            "{} points, {} labels, {} offset rows",
            points.len(),
            labels.len(),
            offsets.n
        )));
    }
    let center_ch = offsets
        .c
        .checked_sub(1)
        .ok_or_else(|| PipelineError::ShapeMismatch("no offset channels".into()))?;
    let center_votes: Vec<Vector3<f64>> = (0..points.len())
        .map(|i| points[i] + Vector3::from(offsets.at(i, center_ch)))
        .collect();
    let mut out = PipelineOutput::default();
    for group in assign_instances(labels, &center_votes, p) {
        let fail = |error| InstanceFailure {
            class_id: group.class_id,
            members: group.members.len(),
            error,
        };
        let model = match registry.get(group.class_id) {
            Ok(m) => m,
            Err(e) => {
                out.failures.push(fail(e));
                continue;
            }
        };
        let Some(votes) = vote_keypoints(points, offsets, &group.members, &p.keypoint_shift) else {
            out.failures
                .push(fail(PipelineError::ShapeMismatch("empty vote set".into())));
            continue;
        };
        match estimate_pose(&votes.keypoints, model) {
            Ok(pose) => out.detections.push(InstanceDetection {
                class_id: group.class_id,
                point_indices: group.members,
                voted_keypoints: votes.keypoints,
                voted_center: votes.center,
                pose,
                vote_inlier_fraction: votes.inlier_fraction,
            }),
            Err(e) => out.failures.push(fail(e)),
        }
    }
    Ok(out)
}

/// Network forward pass followed by [`second_stage`].
pub fn run_pipeline(
    cloud: &PointCloud,
    network: &Network,
    registry: &ModelRegistry,
    p: &PipelineParams,
) -> Result<PipelineOutput, PipelineError> {
    if cloud.is_empty() {
        return Ok(PipelineOutput::default());
    }
    let out = network.predict(cloud)?;
    let labels = argmax_labels(&out.logits);
    second_stage(&cloud.points, &labels, &out.offsets, registry, p)
}

/// On-disk form of one detection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionJson {
    pub class: usize,
    pub pose: PoseJson,
    pub keypoints: Vec<[f64; 3]>,
    pub inlier_fraction: f64,
}

impl From<&InstanceDetection> for DetectionJson {
    fn from(d: &InstanceDetection) -> Self {
        Self {
            class: d.class_id,
            pose: PoseJson::from(&d.pose),
            keypoints: d.voted_keypoints.iter().map(|k| [k.x, k.y, k.z]).collect(),
            inlier_fraction: d.vote_inlier_fraction,
        }
    }
}

#[cfg(test)]
mod tests;
