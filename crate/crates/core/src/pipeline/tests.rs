use super::*;
use crate::geometry::{geodesic_distance, sample_uniform_rotation, Rotation};
use crate::seeded_rng;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn gaussian3(rng: &mut impl Rng, sigma: f64) -> Vector3<f64> {
    let n = Normal::new(0.0, sigma).unwrap();
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

fn cube_model() -> ObjectModel {
    let mut v = Vec::new();
    for x in [-0.05, 0.05] {
        for y in [-0.05, 0.05] {
            for z in [-0.05, 0.05] {
                v.push(Vector3::new(x, y, z));
            }
        }
    }
    let kp = v[..4].to_vec();
    ObjectModel::new(1, "cube", v, None, kp, Vector3::zeros()).unwrap()
}

/// Offsets pointing from each point at the given targets.
fn exact_offsets(points: &[Vector3<f64>], targets: &[Vector3<f64>]) -> OffsetField {
    let mut f = OffsetField::zeros(points.len(), targets.len());
    for (i, p) in points.iter().enumerate() {
        for (j, t) in targets.iter().enumerate() {
            let d = t - p;
            f.set(i, j, [d.x, d.y, d.z]);
        }
    }
    f
}

#[test]
fn model_diameter_of_unit_cube_is_sqrt3() {
    let mut v = Vec::new();
    for c in 0..8 {
        v.push(Vector3::new(
            (c & 1) as f64,
            ((c >> 1) & 1) as f64,
            ((c >> 2) & 1) as f64,
        ));
    }
    assert!((model_diameter(&v) - 3f64.sqrt()).abs() < 1e-15);
}

#[test]
fn model_rejects_keypoints_outside_bounding_sphere() {
    let m = cube_model();
    let mut kp = m.keypoints.clone();
    kp[0] = Vector3::new(1.0, 0.0, 0.0);
    assert!(matches!(
        ObjectModel::new(1, "bad", m.vertices.clone(), None, kp, Vector3::zeros()),
        Err(PipelineError::InvalidModel(_))
    ));
}

#[test]
fn mean_shift_on_coincident_points_returns_that_point() {
    let p = vec![Vector3::new(0.1, 0.2, 0.3); 40];
    let modes = mean_shift(&p, &MeanShiftParams::with_bandwidth(0.02));
    assert_eq!(modes.len(), 1);
    assert!((modes[0].position - p[0]).amax() <= 1e-15);
    assert_eq!(modes[0].support, 40);
}

#[test]
fn single_object_with_coincident_votes_is_one_instance() {
    let labels: Vec<usize> = (0..60).map(|i| if i < 50 { 2 } else { 0 }).collect();
    let votes = vec![Vector3::new(0.0, 0.0, 0.8); 60];
    let groups = assign_instances(&labels, &votes, &PipelineParams::default());
    assert_eq!(
        groups,
        vec![InstanceGroup {
            class_id: 2,
            members: (0..50).collect()
        }]
    );
}

#[test]
fn all_background_gives_no_instances() {
    let votes = vec![Vector3::zeros(); 30];
    assert!(assign_instances(&[0; 30], &votes, &PipelineParams::default()).is_empty());
}

#[test]
fn two_same_class_objects_half_a_meter_apart_separate() {
    let mut rng = seeded_rng(11);
    let centers = [Vector3::new(-0.25, 0.0, 0.8), Vector3::new(0.25, 0.0, 0.8)];
    let n = 300;
    let votes: Vec<Vector3<f64>> = (0..2 * n)
        .map(|i| centers[i / n] + gaussian3(&mut rng, 0.005))
        .collect();
    let groups = assign_instances(&vec![1; 2 * n], &votes, &PipelineParams::default());
    assert_eq!(groups.len(), 2);
    for g in &groups {
        let truth = g.members[0] / n;
        let correct = g.members.iter().filter(|&&i| i / n == truth).count();
        assert!(correct as f64 >= 0.99 * n as f64, "{correct}");
        assert_eq!(correct, g.members.len());
    }
}

#[test]
fn small_clusters_are_dropped() {
    let mut votes = vec![Vector3::new(0.0, 0.0, 0.8); 30];
    votes.extend(vec![Vector3::new(0.5, 0.0, 0.8); 5]);
    let groups = assign_instances(&[1; 35], &votes, &PipelineParams::default());
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].members.len(), 30);
}

#[test]
fn exact_offsets_vote_exact_keypoints() {
    let mut rng = seeded_rng(2);
    let points: Vec<Vector3<f64>> = (0..100).map(|_| gaussian3(&mut rng, 0.05)).collect();
    let targets: Vec<Vector3<f64>> = (0..4).map(|_| gaussian3(&mut rng, 0.05)).collect();
    let f = exact_offsets(&points, &targets);
    let members: Vec<usize> = (0..100).collect();
    let v = vote_keypoints(&points, &f, &members, &MeanShiftParams::with_bandwidth(0.02)).unwrap();
    for (got, want) in v.keypoints.iter().zip(&targets[..3]) {
        assert!((got - want).amax() <= 1e-9);
    }
    assert!((v.center - targets[3]).amax() <= 1e-9);
    assert_eq!(v.inlier_fraction, 1.0);
}

#[test]
fn gaussian_votes_concentrate_at_the_truth() {
    let mut rng = seeded_rng(5);
    let (sigma, n, trials) = (0.005, 500, 200);
    let bound = 3.0 * sigma / (n as f64).sqrt();
    let mut good = 0;
    for _ in 0..trials {
        let truth = gaussian3(&mut rng, 0.1);
        let cands: Vec<Vector3<f64>> = (0..n).map(|_| truth + gaussian3(&mut rng, sigma)).collect();
        let (pos, _) = vote_single(&cands, &MeanShiftParams::with_bandwidth(0.02)).unwrap();
        if (pos - truth).norm() <= bound {
            good += 1;
        }
    }
    assert!(good as f64 >= 0.95 * trials as f64, "{good}/{trials}");
}

#[test]
fn estimate_pose_recovers_constructed_pose() {
    let model = cube_model();
    let mut rng = seeded_rng(8);
    let pose = RigidTransform::new(sample_uniform_rotation(&mut rng), Vector3::new(0.1, -0.2, 0.9));
    let voted: Vec<Vector3<f64>> = model.keypoints.iter().map(|k| pose.apply(k)).collect();
    let got = estimate_pose(&voted, &model).unwrap();
    assert!(geodesic_distance(&got.rotation, &pose.rotation) <= 1e-8);
    assert!((got.translation - pose.translation).norm() <= 1e-8);
}

#[test]
fn estimate_pose_with_three_keypoints() {
    let mut model = cube_model();
    model.keypoints.truncate(3);
    let pose = RigidTransform::new(
        Rotation::from_axis_angle(Vector3::z(), 0.7),
        Vector3::new(0.0, 0.0, 1.0),
    );
    let voted: Vec<Vector3<f64>> = model.keypoints.iter().map(|k| pose.apply(k)).collect();
    let got = estimate_pose(&voted, &model).unwrap();
    assert!(geodesic_distance(&got.rotation, &pose.rotation) <= 1e-8);
}

#[test]
fn estimate_pose_checks_keypoint_count() {
    let model = cube_model();
    assert!(matches!(
        estimate_pose(&model.keypoints[..3], &model),
        Err(PipelineError::ShapeMismatch(_))
    ));
}

#[test]
fn rotation_error_grows_with_vote_noise() {
    let model = cube_model();
    let mut rng = seeded_rng(21);
    let mut medians = Vec::new();
    for sigma in [0.0f64, 1e-3, 1e-2] {
        let mut errs: Vec<f64> = (0..200)
            .map(|_| {
                let pose = RigidTransform::new(sample_uniform_rotation(&mut rng), Vector3::new(0.0, 0.0, 0.8));
                let voted: Vec<Vector3<f64>> = model
                    .keypoints
                    .iter()
                    .map(|k| pose.apply(k) + gaussian3(&mut rng, sigma.max(1e-300)))
                    .collect();
                let got = estimate_pose(&voted, &model).unwrap();
                geodesic_distance(&got.rotation, &pose.rotation)
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        medians.push(errs[100]);
    }
    assert!(medians.windows(2).all(|w| w[0] <= w[1]), "{medians:?}");
}

fn oracle_scene(pose: &RigidTransform, model: &ObjectModel) -> (Vec<Vector3<f64>>, Vec<usize>, OffsetField) {
    let points: Vec<Vector3<f64>> = (0..40).map(|i| pose.apply(&model.vertices[i % 8])).collect();
    let mut targets: Vec<Vector3<f64>> = model.keypoints.iter().map(|k| pose.apply(k)).collect();
    targets.push(pose.apply(&model.center));
    let f = exact_offsets(&points, &targets);
    (points, vec![model.class_id; 40], f)
}

#[test]
fn second_stage_with_oracle_heads_is_exact() {
    let model = cube_model();
    let mut reg = ModelRegistry::default();
    reg.insert(model.clone(), false);
    let pose = RigidTransform::new(
        Rotation::from_axis_angle(Vector3::new(1.0, 2.0, 3.0), 1.1),
        Vector3::new(0.05, 0.0, 0.7),
    );
    let (points, labels, f) = oracle_scene(&pose, &model);
    let out = second_stage(&points, &labels, &f, &reg, &PipelineParams::default()).unwrap();
    assert!(out.failures.is_empty());
    assert_eq!(out.detections.len(), 1);
    let d = &out.detections[0];
    let add = model
        .vertices
        .iter()
        .map(|x| (d.pose.apply(x) - pose.apply(x)).norm())
        .sum::<f64>()
        / 8.0;
    assert!(add <= 1e-9, "{add}");
}

#[test]
fn unknown_class_is_a_per_instance_failure() {
    let model = cube_model();
    let reg = ModelRegistry::default();
    let (points, labels, f) = oracle_scene(&RigidTransform::from_translation(Vector3::new(0.0, 0.0, 1.0)), &model);
    let out = second_stage(&points, &labels, &f, &reg, &PipelineParams::default()).unwrap();
    assert!(out.detections.is_empty());
    assert!(matches!(out.failures[0].error, PipelineError::RegistryMiss(1)));
}

#[test]
fn registry_round_trips_through_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut reg = ModelRegistry::default();
    let mut m = cube_model();
    m.colors = Some(vec![[0.2, 0.4, 0.6]; 8]);
    reg.insert(m.clone(), true);
    reg.save_dir(dir.path()).unwrap();
    let back = ModelRegistry::load_dir(dir.path()).unwrap();
    let got = back.get(1).unwrap();
    assert!(back.is_symmetric(1));
    assert_eq!(got.vertices, m.vertices);
    assert_eq!(got.keypoints, m.keypoints);
    // colours travel as 8-bit channels
    let c = got.colors.as_ref().unwrap()[0];
    assert!((c[0] - 0.2).abs() < 1.0 / 255.0);
}

fn rotate_offsets(f: &OffsetField, r: &Rotation) -> OffsetField {
    let mut out = f.clone();
    for i in 0..f.n {
        for j in 0..f.c {
            let v = r.apply(&Vector3::from(f.at(i, j)));
            out.set(i, j, [v.x, v.y, v.z]);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn second_stage_commutes_with_rotation(seed in any::<u64>()) {
        let model = cube_model();
        let mut reg = ModelRegistry::default();
        reg.insert(model.clone(), false);
        let mut rng = seeded_rng(seed);
        let pose = RigidTransform::new(sample_uniform_rotation(&mut rng), Vector3::new(0.0, 0.1, 0.8));
        let (points, labels, f) = oracle_scene(&pose, &model);
        let r = sample_uniform_rotation(&mut rng);
        let rp: Vec<Vector3<f64>> = points.iter().map(|p| r.apply(p)).collect();
        let p = PipelineParams::default();
        let a = second_stage(&points, &labels, &f, &reg, &p).unwrap();
        let b = second_stage(&rp, &labels, &rotate_offsets(&f, &r), &reg, &p).unwrap();
        let expected = r.compose(&a.detections[0].pose.rotation);
        prop_assert!(geodesic_distance(&expected, &b.detections[0].pose.rotation) <= 1e-7);
    }

    #[test]
    fn inlier_fraction_is_a_fraction(seed in any::<u64>(), n in 1usize..80, spread in 0.001f64..0.5) {
        let mut rng = seeded_rng(seed);
        let points: Vec<Vector3<f64>> = (0..n).map(|_| gaussian3(&mut rng, spread)).collect();
        let targets: Vec<Vector3<f64>> = (0..3).map(|_| gaussian3(&mut rng, spread)).collect();
        let mut f = exact_offsets(&points, &targets);
        for v in &mut f.data {
            *v += rng.random_range(-spread..spread);
        }
        let members: Vec<usize> = (0..n).collect();
        let v = vote_keypoints(&points, &f, &members, &MeanShiftParams::with_bandwidth(0.02)).unwrap();
        prop_assert!((0.0..=1.0).contains(&v.inlier_fraction));
    }

    #[test]
    fn second_stage_is_deterministic(seed in any::<u64>()) {
        let model = cube_model();
        let mut reg = ModelRegistry::default();
        reg.insert(model.clone(), false);
        let mut rng = seeded_rng(seed);
        let pose = RigidTransform::new(sample_uniform_rotation(&mut rng), Vector3::new(0.0, 0.0, 0.9));
        let (points, labels, mut f) = oracle_scene(&pose, &model);
        for v in &mut f.data {
            *v += rng.random_range(-0.003..0.003);
        }
        let p = PipelineParams::default();
        let a = second_stage(&points, &labels, &f, &reg, &p).unwrap();
        let b = second_stage(&points, &labels, &f, &reg, &p).unwrap();
        prop_assert_eq!(a.detections, b.detections);
    }
}
