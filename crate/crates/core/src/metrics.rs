//! Pose metrics: ADD, ADD-S, the capped accuracy-threshold AUC and the
//! 0.1-diameter hit test.

use std::collections::BTreeMap;
use std::path::Path;

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;
use crate::io::{self, IoError};
use crate::pipeline::{ModelRegistry, ObjectModel, PipelineError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("negative or NaN distance {0}")]
    InvalidDistance(f64),
    #[error("unknown class id {0}")]
    RegistryMiss(usize),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl From<PipelineError> for MetricsError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::RegistryMiss(c) => MetricsError::RegistryMiss(c),
            other => MetricsError::Io(IoError::Parse(other.to_string())),
        }
    }
}

pub const AUC_CAP: f64 = 0.1;

/// Mean distance between corresponding transformed vertices.
pub fn add(gt: &RigidTransform, pred: &RigidTransform, vertices: &[Vector3<f64>]) -> f64 {
    let sum: f64 = vertices.iter().map(|x| (gt.apply(x) - pred.apply(x)).norm()).sum();
    sum / vertices.len() as f64
}

/// Mean closest-point distance, `O(m²)` reference.
pub fn add_s_bruteforce(gt: &RigidTransform, pred: &RigidTransform, vertices: &[Vector3<f64>]) -> f64 {
    let moved: Vec<Vector3<f64>> = vertices.iter().map(|x| pred.apply(x)).collect();
    let sum: f64 = vertices
        .iter()
        .map(|x| {
            let a = gt.apply(x);
            moved.iter().map(|b| (a - b).norm()).fold(f64::INFINITY, f64::min)
        })
        .sum();
    sum / vertices.len() as f64
}

/// A kd-tree over one model's predicted-pose vertices.
///
/// The tree is built in a fixed generic frame so that axis-aligned faces of
/// synthetic boxes do not put many points on one split plane. The returned
/// distance is recomputed in the camera frame with the brute-force formula.
pub struct ClosestPointIndex {
    tree: ImmutableKdTree<f64, u32, 3, 32>,
    frame: Matrix3<f64>,
    moved: Vec<Vector3<f64>>,
}

fn generic_frame() -> Matrix3<f64> {
    *nalgebra::Rotation3::from_axis_angle(
        &nalgebra::Unit::new_normalize(Vector3::new(0.267, -0.534, 0.802)),
        0.913,
    )
    .matrix()
}

impl ClosestPointIndex {
    pub fn new(pred: &RigidTransform, vertices: &[Vector3<f64>]) -> Self {
        let frame = generic_frame();
        let moved: Vec<Vector3<f64>> = vertices.iter().map(|x| pred.apply(x)).collect();
        let rotated: Vec<[f64; 3]> = moved
            .iter()
            .map(|b| {
                let q = frame * b;
                [q.x, q.y, q.z]
            })
            .collect();
        Self {
            tree: ImmutableKdTree::new_from_slice(&rotated),
            frame,
            moved,
        }
    }

    pub fn nearest_distance(&self, a: &Vector3<f64>) -> f64 {
        let q = self.frame * a;
        let hit = self.tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
        (a - self.moved[hit.item as usize]).norm()
    }
}

/// [`add_s_bruteforce`] accelerated with a kd-tree.
pub fn add_s(gt: &RigidTransform, pred: &RigidTransform, vertices: &[Vector3<f64>]) -> f64 {
    if vertices.is_empty() {
        return f64::NAN;
    }
    let index = ClosestPointIndex::new(pred, vertices);
    let sum: f64 = vertices.iter().map(|x| index.nearest_distance(&gt.apply(x))).sum();
    sum / vertices.len() as f64
}

/// ADD-S for symmetric objects, ADD otherwise.
pub fn add_or_s(gt: &RigidTransform, pred: &RigidTransform, model: &ObjectModel, symmetric: bool) -> f64 {
    if symmetric {
        add_s(gt, pred, &model.vertices)
    } else {
        add(gt, pred, &model.vertices)
    }
}

/// Exact area under the accuracy-threshold step curve on `[0, cap]`, in
/// percent. Each distance `d` contributes `max(0, 1 − d / cap) / n`.
pub fn auc(distances: &[f64], cap: f64) -> Result<f64, MetricsError> {
    if distances.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(&d) = distances.iter().find(|d| !(**d >= 0.0)) {
        return Err(MetricsError::InvalidDistance(d));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mass: f64 = sorted.iter().map(|d| (1.0 - d / cap).max(0.0)).sum();
    Ok(100.0 * mass / sorted.len() as f64)
}

pub fn hit_01d(distance: f64, diameter: f64) -> bool {
    distance < 0.1 * diameter
}

/// One ground-truth object and its matched detection, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub scene: String,
    pub class_id: usize,
    pub symmetric: bool,
    pub detected: bool,
    /// Infinite for misses; serialised as `null`.
    #[serde(with = "inf_as_null")]
    pub add: f64,
    #[serde(with = "inf_as_null")]
    pub add_s: f64,
    #[serde(with = "inf_as_null")]
    pub add_or_s: f64,
    pub hit_01d: bool,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub class_id: usize,
    pub name: String,
    pub symmetric: bool,
    pub adds_auc: f64,
    pub add_or_s_auc: f64,
    pub hit_rate_01d: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMetricsReport {
    pub samples: Vec<SampleRecord>,
    pub objects: Vec<ObjectSummary>,
    /// Over all samples.
    pub overall: ObjectSummary,
}

/// Ground truth and detections for one scene.
#[derive(Debug, Clone)]
pub struct SceneEval<'a> {
    pub scene: String,
    pub gt: &'a [(usize, RigidTransform)],
    pub detections: &'a [(usize, RigidTransform)],
}

fn summarize(
    class_id: usize,
    name: &str,
    symmetric: bool,
    recs: &[&SampleRecord],
) -> Result<ObjectSummary, MetricsError> {
    let adds: Vec<f64> = recs.iter().map(|r| r.add_s).collect();
    let mixed: Vec<f64> = recs.iter().map(|r| r.add_or_s).collect();
    let hits = recs.iter().filter(|r| r.hit_01d).count();
    Ok(ObjectSummary {
        class_id,
        name: name.to_string(),
        symmetric,
        adds_auc: auc(&adds, AUC_CAP)?,
        add_or_s_auc: auc(&mixed, AUC_CAP)?,
        hit_rate_01d: 100.0 * hits as f64 / recs.len() as f64,
        n_samples: recs.len(),
    })
}

/// Matches each ground-truth object to the unused same-class detection with
/// the nearest translation; unmatched objects count as misses at infinite
/// distance.
pub fn evaluate_dataset(scenes: &[SceneEval<'_>], registry: &ModelRegistry) -> Result<PoseMetricsReport, MetricsError> {
    let mut samples = Vec::new();
    for s in scenes {
        let mut used = vec![false; s.detections.len()];
        for (class_id, gt) in s.gt {
            let model = registry.get(*class_id)?;
            let symmetric = registry.is_symmetric(*class_id);
            let best = s
                .detections
                .iter()
                .enumerate()
                .filter(|(j, (c, _))| !used[*j] && c == class_id)
                .map(|(j, (_, p))| (j, (p.translation - gt.translation).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let rec = match best {
                Some((j, _)) => {
                    used[j] = true;
                    let pred = &s.detections[j].1;
                    let a = add(gt, pred, &model.vertices);
                    let a_s = add_s(gt, pred, &model.vertices);
                    let mixed = if symmetric { a_s } else { a };
                    SampleRecord {
                        scene: s.scene.clone(),
                        class_id: *class_id,
                        symmetric,
                        detected: true,
                        add: a,
                        add_s: a_s,
                        add_or_s: mixed,
                        hit_01d: hit_01d(mixed, model.diameter),
                    }
                }
                None => SampleRecord {
                    scene: s.scene.clone(),
                    class_id: *class_id,
                    symmetric,
                    detected: false,
                    add: f64::INFINITY,
                    add_s: f64::INFINITY,
                    add_or_s: f64::INFINITY,
                    hit_01d: false,
                },
            };
            samples.push(rec);
        }
    }
    if samples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut by_class: BTreeMap<usize, Vec<&SampleRecord>> = BTreeMap::new();
    for r in &samples {
        by_class.entry(r.class_id).or_default().push(r);
    }
    let mut objects = Vec::new();
    for (c, recs) in &by_class {
        let model = registry.get(*c)?;
        objects.push(summarize(*c, &model.name, registry.is_symmetric(*c), recs)?);
    }
    let all: Vec<&SampleRecord> = samples.iter().collect();
    let overall = summarize(0, "all", false, &all)?;
    Ok(PoseMetricsReport {
        samples,
        objects,
        overall,
    })
}

impl PoseMetricsReport {
    /// `object, ADDS_AUC, ADD(-S)_AUC, hit_rate_01d, n_samples`, one row per
    /// class then an `all` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("object,ADDS_AUC,ADD(-S)_AUC,hit_rate_01d,n_samples\n");
        for o in self.objects.iter().chain(std::iter::once(&self.overall)) {
            let name = if o.symmetric {
                format!("{}*", o.name)
            } else {
                o.name.clone()
            };
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{}\n",
                name, o.adds_auc, o.add_or_s_auc, o.hit_rate_01d, o.n_samples
            ));
        }
        out
    }

    pub fn write(&self, csv: &Path, json: &Path) -> Result<(), MetricsError> {
        io::write_atomic(csv, self.to_csv().as_bytes()).map_err(IoError::from)?;
        io::write_json_atomic(json, &self.samples)?;
        Ok(())
    }
}
