use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use vnpose::backprojection::{depth_to_cloud, CameraIntrinsics, DepthImage};
use vnpose::geometry::{fit_rigid_least_squares, sample_uniform_rotation, PoseJson};
use vnpose::io::{self, CorrespondencesJson};
use vnpose::losses::LossWeights;
use vnpose::metrics::{evaluate_dataset, ObjectSummary, PoseMetricsReport, SceneEval};
use vnpose::network::{ArchSpec, Network, ObjectiveConfig, So3Target};
use vnpose::pipeline::{run_pipeline, second_stage, DetectionJson, ModelRegistry, PipelineParams};
use vnpose::synth::{default_registry, generate_scenes, list_scenes, scene_stem, SceneConfig, SceneSample};
use vnpose::trainer::gradcheck::GradcheckReport;
use vnpose::trainer::{
    descent_ratio, network_gradcheck, train as run_training, write_curve_csv, TrainConfig, TrainError, TrainSample,
};
use vnpose::vn::suite::{run_suite, SuiteReport};
use vnpose::vn::{LayerSpec, VectorFeature};
use vnpose::{seeded_rng, RigidTransform};

use crate::error::{bad_input, internal, invalid, CliError};
use crate::run::Run;

/// Detections (or ground truth) of one scene on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneDetections {
    pub scene: String,
    pub detections: Vec<DetectionJson>,
    /// Instances the pipeline found but could not fit.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

fn load_registry(dir: &Path) -> Result<ModelRegistry, CliError> {
    ModelRegistry::load_dir(dir).map_err(bad_input(format!("models {}", dir.display())))
}

fn models_dir(models: &Option<PathBuf>, scenes: &Path) -> PathBuf {
    models.clone().unwrap_or_else(|| scenes.join("models"))
}

fn load_named_scenes(dir: &Path) -> Result<Vec<(String, SceneSample)>, CliError> {
    let paths = list_scenes(dir).map_err(bad_input(format!("scenes {}", dir.display())))?;
    if paths.is_empty() {
        return Err(invalid(format!("no scene_*.ply files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let s = SceneSample::load(p).map_err(bad_input(p.display()))?;
            Ok((name, s))
        })
        .collect()
}

fn read_json_input<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    io::read_json(path).map_err(bad_input(path.display()))
}

fn pipeline_params(path: &Option<PathBuf>) -> Result<PipelineParams, CliError> {
    path.as_deref().map_or(Ok(PipelineParams::default()), read_json_input)
}

fn gt_of(scene: &SceneSample) -> Vec<(usize, RigidTransform)> {
    scene.gt_poses.iter().map(|g| (g.class_id, g.pose)).collect()
}

fn parse_poses(entries: &[DetectionJson], source: &Path) -> Result<Vec<(usize, RigidTransform)>, CliError> {
    entries
        .iter()
        .map(|d| {
            let pose = RigidTransform::try_from(&d.pose).map_err(bad_input(source.display()))?;
            Ok((d.class, pose))
        })
        .collect()
}

fn print_summary(o: &ObjectSummary) {
    println!(
        "{} hit_rate_01d {:.4} adds_auc {:.4} add_or_s_auc {:.4} n {}",
        o.name, o.hit_rate_01d, o.adds_auc, o.add_or_s_auc, o.n_samples
    );
}

fn write_report(run: &mut Run, report: &PoseMetricsReport) -> Result<(), CliError> {
    let (csv, json) = (run.path("metrics.csv"), run.path("samples.json"));
    report.write(&csv, &json).map_err(internal("writing metrics"))?;
    run.record(csv);
    run.record(json);
    for o in report.objects.iter().chain(std::iter::once(&report.overall)) {
        print_summary(o);
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct CheckEquivariance {
    /// Random (feature, parameters, rotation) draws per layer.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Largest admissible normalised residual.
    #[arg(long, default_value = "1e-10")]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(short, long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct EquivarianceReport<'a> {
    tolerance: f64,
    passed: bool,
    first_violation: Option<&'a str>,
    #[serde(flatten)]
    suite: &'a SuiteReport,
}

pub fn check_equivariance(a: &CheckEquivariance) -> Result<(), CliError> {
    if a.trials == 0 {
        return Err(invalid("--trials must be at least 1"));
    }
    if !(a.tolerance >= 0.0) {
        return Err(invalid(format!(
            "--tolerance {} is not a non-negative number",
            a.tolerance
        )));
    }
    let mut run = Run::new("check-equivariance", &a.out_dir, a, Some(a.seed))?;
    let suite = run_suite(a.trials, a.seed);
    let violation = suite.first_violation(a.tolerance);
    let report = EquivarianceReport {
        tolerance: a.tolerance,
        passed: violation.is_none(),
        first_violation: violation.map(|l| l.layer.as_str()),
        suite: &suite,
    };
    run.write_json("equivariance_report.json", &report)?;
    run.finish()?;
    for l in &suite.layers {
        println!("{} {:?} {:.3e}", l.layer, l.property, l.max_residual);
    }
    match violation {
        Some(l) => Err(CliError::property(format!(
            "layer {} {:?} residual {:e} exceeds tolerance {:e}",
            l.layer, l.property, l.max_residual, a.tolerance
        ))),
        None => Ok(()),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthGen {
    /// Number of scenes, one object each.
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    /// Reuse the object models in this directory instead of generating new ones.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Vertices per generated object model.
    #[arg(long, default_value_t = 300)]
    pub vertices: usize,
    /// Keypoints per generated object model.
    #[arg(long, default_value_t = 8)]
    pub keypoints: usize,
    /// Per-point Gaussian noise, meters.
    #[arg(long, default_value_t = 0.002)]
    pub noise: f64,
    /// Occluded fraction of each object.
    #[arg(long, default_value_t = 0.3)]
    pub occlusion: f64,
    /// Draw each object's occluded fraction uniformly from [occlusion-min, occlusion].
    #[arg(long)]
    pub occlusion_min: Option<f64>,
    /// Uniform clutter points per scene.
    #[arg(long, default_value_t = 0)]
    pub background: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

pub fn synth_gen(a: &SynthGen) -> Result<(), CliError> {
    let cfg = SceneConfig {
        noise_sigma: a.noise,
        occlusion: a.occlusion,
        occlusion_min: a.occlusion_min,
        background_points: a.background,
        ..SceneConfig::default()
    };
    cfg.validate(1).map_err(bad_input("scene config"))?;
    let reg = match &a.models {
        Some(dir) => load_registry(dir)?,
        None => default_registry(a.vertices, a.keypoints, a.seed).map_err(bad_input("object models"))?,
    };
    let mut run = Run::new("synth-gen", &a.out_dir, a, Some(a.seed))?;
    let models = run.path("models");
    reg.save_dir(&models).map_err(internal("writing models"))?;
    run.record(models);
    let scenes = generate_scenes(&reg, &cfg, a.scenes, a.seed).map_err(bad_input("scene generation"))?;
    let mut gt = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let stem = scene_stem(i);
        s.save(&a.out_dir, &stem).map_err(internal(format!("writing {stem}")))?;
        run.record(run.path(&format!("{stem}.ply")));
        run.record(run.path(&format!("{stem}.json")));
        let detections = s
            .gt_poses
            .iter()
            .map(|g| {
                let model = reg.get(g.class_id).map_err(internal("registry"))?;
                Ok(DetectionJson {
                    class: g.class_id,
                    pose: PoseJson::from(&g.pose),
                    keypoints: model.keypoints.iter().map(|k| g.pose.apply(k).into()).collect(),
                    inlier_fraction: 1.0,
                })
            })
            .collect::<Result<_, CliError>>()?;
        gt.push(SceneDetections {
            scene: stem,
            detections,
            failures: Vec::new(),
        });
    }
    run.write_json("ground_truth.json", &gt)?;
    run.finish()?;
    println!("{} scenes, {} models", scenes.len(), reg.models.len());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct Train {
    /// Scene directory written by synth-gen.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Object models [default: <scenes>/models].
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Training configuration JSON; absent fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture JSON [default: the toy network sized from the models].
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Overrides the config's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the config's step cap.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Overrides the config's base learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Seeds parameter initialisation and the batch order; replaces the config's seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print losses to stderr every this many steps; 0 is silent.
    #[arg(long, default_value_t = 0)]
    pub log_every: usize,
    #[arg(short, long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

pub fn train(a: &Train) -> Result<(), CliError> {
    let reg = load_registry(&models_dir(&a.models, &a.scenes))?;
    let scenes = load_named_scenes(&a.scenes)?;
    let mut cfg: TrainConfig = a
        .config
        .as_deref()
        .map_or(Ok(TrainConfig::default()), read_json_input)?;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.max_steps = a.max_steps.or(cfg.max_steps);
    cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.seed = a.seed;
    cfg.validate().map_err(bad_input("training config"))?;
    let keypoints = scenes[0].1.num_keypoints();
    if let Some((name, _)) = scenes.iter().find(|(_, s)| s.num_keypoints() != keypoints) {
        return Err(invalid(format!(
            "{name} has a different keypoint count than {}",
            scenes[0].0
        )));
    }
    let arch = match &a.arch {
        Some(p) => read_json_input(p)?,
        None => {
            let classes = reg.models.keys().max().map_or(1, |c| c + 1);
            ArchSpec::toy(classes, keypoints)
        }
    };
    let mut net = Network::init(arch.clone(), a.seed).map_err(bad_input("architecture"))?;
    let data = scenes
        .iter()
        .map(|(name, s)| TrainSample::from_scene(&net, s).map_err(bad_input(name)))
        .collect::<Result<Vec<_>, _>>()?;
    let config = serde_json::json!({ "args": a, "train": cfg, "arch": arch });
    let mut run = Run::new("train", &a.out_dir, &config, Some(a.seed))?;
    let every = a.log_every;
    let outcome = run_training(&mut net, &data, &cfg, |row| {
        if every > 0 && row.step % every == 0 {
            eprintln!(
                "step {} total {:.5} seg {:.5} kp {:.5} center {:.5} so3 {:.5} lr {:.2e}",
                row.step, row.total, row.seg, row.kp, row.center, row.so3, row.lr
            );
        }
    })
    .map_err(|e| match e {
        TrainError::ConfigInvalid(_) | TrainError::EmptyDataset => bad_input("training")(e),
        e => internal("training")(e),
    })?;
    let (bin, json) = (run.path("params.bin"), run.path("params.json"));
    net.save(&bin, &json).map_err(internal("writing parameters"))?;
    run.record(bin);
    run.record(json);
    let csv = run.path("loss.csv");
    write_curve_csv(&csv, &outcome.curve).map_err(internal("writing loss curve"))?;
    run.record(csv);
    run.finish()?;
    let last = outcome.curve.last().map_or(f64::NAN, |r| r.total);
    let ratio = descent_ratio(&outcome.curve).map_or("n/a".to_string(), |r| format!("{r:.4}"));
    println!(
        "steps {} seconds {:.1} final_total {last:.5} descent_ratio {ratio}{}",
        outcome.steps,
        outcome.seconds,
        if outcome.timed_out { " timed_out" } else { "" }
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct Eval {
    /// Scene directory written by synth-gen.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Object models [default: <scenes>/models].
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Directory with params.bin and params.json from train.
    #[arg(long, required_unless_present = "oracle")]
    pub params: Option<PathBuf>,
    /// Feed ground-truth labels and offsets to voting and fitting instead of a network.
    #[arg(long, conflicts_with = "params")]
    pub oracle: bool,
    /// Pipeline parameters JSON [default: built-in bandwidths].
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    #[arg(short, long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

pub fn eval(a: &Eval) -> Result<(), CliError> {
    let reg = load_registry(&models_dir(&a.models, &a.scenes))?;
    let scenes = load_named_scenes(&a.scenes)?;
    let params = pipeline_params(&a.pipeline)?;
    let net = match &a.params {
        Some(dir) => {
            let net = Network::load(&dir.join("params.bin"), &dir.join("params.json"))
                .map_err(bad_input(format!("parameters in {}", dir.display())))?;
            Some(net)
        }
        None => None,
    };
    let config = serde_json::json!({ "args": a, "pipeline": params });
    let mut run = Run::new("eval", &a.out_dir, &config, None)?;
    let mut out = Vec::with_capacity(scenes.len());
    let mut poses = Vec::with_capacity(scenes.len());
    for (name, s) in &scenes {
        let result = match &net {
            Some(net) => run_pipeline(&s.cloud, net, &reg, &params),
            None => second_stage(&s.cloud.points, &s.labels, &s.gt_offsets, &reg, &params),
        }
        .map_err(bad_input(name))?;
        poses.push(
            result
                .detections
                .iter()
                .map(|d| (d.class_id, d.pose))
                .collect::<Vec<_>>(),
        );
        out.push(SceneDetections {
            scene: name.clone(),
            detections: result.detections.iter().map(DetectionJson::from).collect(),
            failures: result
                .failures
                .iter()
                .map(|f| format!("class {} ({} points): {}", f.class_id, f.members, f.error))
                .collect(),
        });
    }
    let gts: Vec<_> = scenes.iter().map(|(_, s)| gt_of(s)).collect();
    let evals: Vec<SceneEval<'_>> = scenes
        .iter()
        .zip(&gts)
        .zip(&poses)
        .map(|(((name, _), gt), det)| SceneEval {
            scene: name.clone(),
            gt,
            detections: det,
        })
        .collect();
    let report = evaluate_dataset(&evals, &reg).map_err(bad_input("evaluation"))?;
    run.write_json("detections.json", &out)?;
    write_report(&mut run, &report)?;
    run.finish()?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct FitPose {
    /// Correspondences JSON: {"source": [[x,y,z]..], "target": [..], "weights": [..]?}.
    #[arg(long)]
    pub correspondences: PathBuf,
    #[arg(short, long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

pub fn fit_pose(a: &FitPose) -> Result<(), CliError> {
    let c: CorrespondencesJson = read_json_input(&a.correspondences)?;
    let c = c
        .into_correspondences()
        .map_err(bad_input(a.correspondences.display()))?;
    let pose = fit_rigid_least_squares(&c).map_err(bad_input("rigid fit"))?;
    let mut run = Run::new("fit-pose", &a.out_dir, a, None)?;
    let json = PoseJson::from(&pose);
    run.write_json("pose.json", &json)?;
    run.finish()?;
    println!("{}", serde_json::to_string(&json).map_err(internal("pose"))?);
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct Metrics {
    /// Object models directory.
    #[arg(long)]
    pub models: PathBuf,
    /// Ground truth in the detections format, e.g. ground_truth.json from synth-gen.
    #[arg(long)]
    pub gt: PathBuf,
    /// Detections JSON, e.g. detections.json from eval.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(short, long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

pub fn metrics(a: &Metrics) -> Result<(), CliError> {
    let reg = load_registry(&a.models)?;
    let gt: Vec<SceneDetections> = read_json_input(&a.gt)?;
    let det: Vec<SceneDetections> = read_json_input(&a.detections)?;
    let mut by_scene: BTreeMap<&str, Vec<(usize, RigidTransform)>> = BTreeMap::new();
    for d in &det {
        if !gt.iter().any(|g| g.scene == d.scene) {
            return Err(invalid(format!(
                "detections name scene {} absent from ground truth",
                d.scene
            )));
        }
        by_scene
            .entry(&d.scene)
            .or_default()
            .extend(parse_poses(&d.detections, &a.detections)?);
    }
    let gts = gt
        .iter()
        .map(|g| parse_poses(&g.detections, &a.gt))
        .collect::<Result<Vec<_>, _>>()?;
    let empty = Vec::new();
    let evals: Vec<SceneEval<'_>> = gt
        .iter()
        .zip(&gts)
        .map(|(g, poses)| SceneEval {
            scene: g.scene.clone(),
            gt: poses,
            detections: by_scene.get(g.scene.as_str()).unwrap_or(&empty),
        })
        .collect();
    let report = evaluate_dataset(&evals, &reg).map_err(bad_input("evaluation"))?;
    let mut run = Run::new("metrics", &a.out_dir, a, None)?;
    write_report(&mut run, &report)?;
    run.finish()?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct Gradcheck {
    /// Central-difference step.
    #[arg(long, default_value = "1e-5")]
    pub step: f64,
    /// Largest admissible relative error.
    #[arg(long, default_value = "1e-4")]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

/// A network small enough for a full finite-difference sweep that still
/// contains every backbone layer kind.
fn gradcheck_arch() -> ArchSpec {
    use LayerSpec::*;
    ArchSpec {
        input_scale: 10.0,
        backbone: vec![
            Linear { c_out: 4 },
            GlobalConcat,
            Relu { c_out: 5 },
            BatchNorm,
            Linear { c_out: 5 },
            Relu { c_out: 4 },
        ],
        e2i_c1: Some(3),
        e2i_c2: Some(3),
        e2i_hidden: 5,
        e2i_out: 4,
        appearance_hidden: 4,
        appearance_out: 3,
        seg_hidden: 6,
        num_classes: 4,
        kp_hidden: 8,
        num_keypoints: 3,
        image_size: (640, 480),
    }
}

#[derive(Serialize)]
struct GradcheckRow {
    target: So3Target,
    #[serde(flatten)]
    report: GradcheckReport,
}

pub fn gradcheck(a: &Gradcheck) -> Result<(), CliError> {
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(invalid(format!("--step {} must be positive", a.step)));
    }
    if !(a.tolerance >= 0.0) {
        return Err(invalid(format!(
            "--tolerance {} is not a non-negative number",
            a.tolerance
        )));
    }
    let mut run = Run::new("gradcheck", &a.out_dir, a, Some(a.seed))?;
    let net = Network::init(gradcheck_arch(), a.seed).map_err(internal("network"))?;
    let reg = default_registry(60, 3, a.seed).map_err(internal("models"))?;
    let cfg = SceneConfig {
        noise_sigma: 0.001,
        occlusion: 0.7,
        background_points: 4,
        ..SceneConfig::default()
    };
    let scene = generate_scenes(&reg, &cfg, 1, a.seed)
        .map_err(internal("scene"))?
        .remove(0);
    let mut sample = TrainSample::from_scene(&net, &scene).map_err(internal("sample"))?;
    let mut rng = seeded_rng(a.seed);
    // scene features are parallel per point, which parks batch norm on
    // zero-norm vectors; random features cover every layer
    sample.input.features = VectorFeature::random(sample.input.features.n, 4, &mut rng);
    let r = sample_uniform_rotation(&mut rng);
    let base = ObjectiveConfig {
        weights: LossWeights {
            so3: 0.5,
            ..LossWeights::default()
        },
        ..ObjectiveConfig::default()
    };
    let mut rows = Vec::new();
    for target in [So3Target::KeypointPath, So3Target::Backbone] {
        let cfg = ObjectiveConfig {
            so3_target: target,
            ..base
        };
        let report = network_gradcheck(&net, &sample, Some(&r), &cfg, a.step).map_err(internal("gradcheck"))?;
        rows.push(GradcheckRow { target, report });
    }
    let worst = rows.iter().fold(0.0f64, |m, r| m.max(r.report.max_rel_error));
    run.write_json("gradcheck.json", &rows)?;
    run.finish()?;
    println!("max_rel_error {worst:.3e}");
    if worst <= a.tolerance {
        Ok(())
    } else {
        Err(CliError::property(format!(
            "max relative error {worst:e} exceeds {:e}",
            a.tolerance
        )))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct Backproject {
    /// 16-bit binary PGM depth image.
    #[arg(long)]
    pub depth: PathBuf,
    /// Intrinsics JSON: {"fx", "fy", "cx", "cy", "skew"?}.
    #[arg(long)]
    pub intrinsics: PathBuf,
    /// Depth ticks per meter.
    #[arg(long, default_value_t = 1000.0)]
    pub ticks_per_meter: f64,
    #[arg(short, long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

pub fn backproject(a: &Backproject) -> Result<(), CliError> {
    let k = CameraIntrinsics::load(&a.intrinsics).map_err(bad_input(a.intrinsics.display()))?;
    let depth = DepthImage::load_pgm(&a.depth, a.ticks_per_meter).map_err(bad_input(a.depth.display()))?;
    let cloud = depth_to_cloud(&depth, &k, None);
    let mut run = Run::new("backproject", &a.out_dir, a, None)?;
    let ply = run.path("cloud.ply");
    cloud
        .to_ply_table()
        .write(&ply, &[])
        .map_err(internal("writing cloud"))?;
    run.record(ply);
    run.finish()?;
    println!("{} points", cloud.len());
    Ok(())
}
