use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::Vector3;
use serde_json::Value;
use vnpose::{RigidTransform, Rotation};

fn vnpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vnpose"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// The error line on stderr, parsed.
fn error_line(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "{text}");
    serde_json::from_str(lines[0]).unwrap()
}

#[test]
fn version_is_the_build_id_recorded_in_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let v = vnpose(&["--version"]);
    assert_eq!(code(&v), 0);
    let printed = String::from_utf8(v.stdout).unwrap();
    let id = printed.trim().strip_prefix("vnpose ").unwrap().to_string();
    let out = dir.path().join("eq");
    assert_eq!(
        code(&vnpose(&["check-equivariance", "--trials", "5", "-o", p(&out)])),
        0
    );
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["tool_version"], id.as_str());
    assert_eq!(m["command"], "check-equivariance");
    assert_eq!(m["seed"], 0);
    assert_eq!(m["config_digest"].as_str().unwrap().len(), 64);
    assert!(m["wall_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn help_lists_defaults() {
    let h = vnpose(&["check-equivariance", "--help"]);
    assert_eq!(code(&h), 0);
    let text = String::from_utf8(h.stdout).unwrap();
    for needle in ["[default: 1000]", "[default: 1e-10]", "--seed"] {
        assert!(text.contains(needle), "{needle} missing from\n{text}");
    }
}

#[test]
fn check_equivariance_passes_by_default_and_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = vnpose(&["check-equivariance", "--seed", "7", "-o", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ra = fs::read(a.join("equivariance_report.json")).unwrap();
    assert_eq!(ra, fs::read(b.join("equivariance_report.json")).unwrap());
    let report: Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["trials"], 1000);
    let ma = read_json(&a.join("manifest.json"));
    assert_eq!(
        ma["config_digest"],
        read_json(&b.join("manifest.json"))["config_digest"]
    );
}

#[test]
fn zero_tolerance_is_a_property_failure_naming_the_layer() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eq");
    let o = vnpose(&[
        "check-equivariance",
        "--trials",
        "20",
        "--tolerance",
        "0",
        "-o",
        p(&out),
    ]);
    assert_eq!(code(&o), 1);
    let e = error_line(&o);
    assert_eq!(e["kind"], "property_failure");
    assert_eq!(e["exit_code"], 1);
    let failing = read_json(&out.join("equivariance_report.json"))["first_violation"]
        .as_str()
        .unwrap()
        .to_string();
    assert!(e["reason"].as_str().unwrap().contains(&failing));
    assert!(out.join("manifest.json").exists());
}

fn write_correspondences(dir: &Path, pose: &RigidTransform) -> std::path::PathBuf {
    let source: Vec<[f64; 3]> = (0..12)
        .map(|i| {
            let t = i as f64;
            [0.1 * (t * 0.7).sin(), 0.08 * (t * 1.3).cos(), 0.05 * t - 0.2]
        })
        .collect();
    let target: Vec<[f64; 3]> = source.iter().map(|s| pose.apply(&Vector3::from(*s)).into()).collect();
    let path = dir.join("corr.json");
    fs::write(
        &path,
        serde_json::to_vec(&serde_json::json!({"source": source, "target": target})).unwrap(),
    )
    .unwrap();
    path
}

#[test]
fn fit_pose_recovers_a_constructed_pose() {
    let dir = tempfile::tempdir().unwrap();
    let pose = RigidTransform::new(
        Rotation::from_axis_angle(Vector3::new(0.2, -0.5, 0.9), 2.1),
        Vector3::new(0.05, -0.12, 0.83),
    );
    let corr = write_correspondences(dir.path(), &pose);
    let out = dir.path().join("fit");
    let o = vnpose(&["fit-pose", "--correspondences", p(&corr), "-o", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fitted: RigidTransform = serde_json::from_slice(&fs::read(out.join("pose.json")).unwrap()).unwrap();
    let dr = (fitted.rotation.matrix() - pose.rotation.matrix()).abs().max();
    let dt = (fitted.translation - pose.translation).abs().max();
    assert!(dr <= 1e-8 && dt <= 1e-8, "{dr} {dt}");
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["artifacts"][0], p(&out.join("pose.json")));
}

#[test]
fn bad_input_exits_two_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("garbage.json");
    fs::write(&garbage, b"{not json").unwrap();
    let degenerate = dir.path().join("degenerate.json");
    fs::write(&degenerate, br#"{"source": [[0,0,0],[1,0,0]], "target": [[0,0,0]]}"#).unwrap();
    let out = dir.path().join("o");
    let cases: Vec<Vec<&str>> = vec![
        vec!["fit-pose", "--correspondences", "/nonexistent/corr.json", "-o", p(&out)],
        vec!["fit-pose", "--correspondences", p(&garbage), "-o", p(&out)],
        vec!["fit-pose", "--correspondences", p(&degenerate), "-o", p(&out)],
        vec!["check-equivariance", "--trials", "0", "-o", p(&out)],
        vec!["check-equivariance", "--tolerance", "abc", "-o", p(&out)],
        vec!["eval", "--scenes", p(dir.path()), "--oracle", "-o", p(&out)],
        vec!["synth-gen", "--occlusion", "0.95", "-o", p(&out)],
        vec!["no-such-command"],
    ];
    for args in cases {
        let o = vnpose(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        let e = error_line(&o);
        assert_eq!(e["kind"], "bad_input", "{args:?}");
        assert!(!e["reason"].as_str().unwrap().is_empty());
    }
}

#[test]
fn unwritable_output_is_an_internal_error() {
    let dir = tempfile::tempdir().unwrap();
    let pose = RigidTransform::new(Rotation::identity(), Vector3::new(0.0, 0.0, 1.0));
    let corr = write_correspondences(dir.path(), &pose);
    let out = dir.path().join("fit");
    // a directory where the pose file should go makes the final rename fail
    fs::create_dir_all(out.join("pose.json").join("blocker")).unwrap();
    let o = vnpose(&["fit-pose", "--correspondences", p(&corr), "-o", p(&out)]);
    assert_eq!(code(&o), 3);
    assert_eq!(error_line(&o)["kind"], "internal");
}

#[test]
fn oracle_eval_and_metrics_on_ground_truth_score_100() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let o = vnpose(&[
        "synth-gen",
        "--scenes",
        "12",
        "--noise",
        "0",
        "--seed",
        "3",
        "-o",
        p(&scenes),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let ev = dir.path().join("eval");
    let o = vnpose(&["eval", "--scenes", p(&scenes), "--oracle", "-o", p(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let all = csv.lines().find(|l| l.starts_with("all,")).unwrap();
    assert_eq!(all.split(',').nth(3).unwrap(), "100.0000", "{csv}");
    let det = read_json(&ev.join("detections.json"));
    assert_eq!(det.as_array().unwrap().len(), 12);

    let gt = scenes.join("ground_truth.json");
    let m = dir.path().join("metrics");
    let models = scenes.join("models");
    let args = [
        "metrics",
        "--models",
        p(&models),
        "--gt",
        p(&gt),
        "--detections",
        p(&gt),
        "-o",
        p(&m),
    ];
    let o = vnpose(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(m.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "{csv}");
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(&f[1..4], ["100.0000"; 3], "{row}");
    }
}

#[test]
fn metrics_counts_missing_detections_as_misses() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    assert_eq!(code(&vnpose(&["synth-gen", "--scenes", "4", "-o", p(&scenes)])), 0);
    let empty = dir.path().join("none.json");
    fs::write(&empty, b"[]").unwrap();
    let m = dir.path().join("m");
    let gt = scenes.join("ground_truth.json");
    let o = vnpose(&[
        "metrics",
        "--models",
        p(&scenes.join("models")),
        "--gt",
        p(&gt),
        "--detections",
        p(&empty),
        "-o",
        p(&m),
    ]);
    assert_eq!(code(&o), 0);
    let samples = read_json(&m.join("samples.json"));
    let samples = samples.as_array().unwrap();
    assert_eq!(samples.len(), 4);
    assert!(samples.iter().all(|s| s["detected"] == false && s["add"].is_null()));
}

#[test]
fn synth_gen_reuses_models_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for out in [&a, &b] {
        assert_eq!(
            code(&vnpose(&["synth-gen", "--scenes", "3", "--seed", "5", "-o", p(out)])),
            0
        );
    }
    let models = a.join("models");
    let o = vnpose(&[
        "synth-gen",
        "--scenes",
        "3",
        "--seed",
        "6",
        "--models",
        p(&models),
        "-o",
        p(&c),
    ]);
    assert_eq!(code(&o), 0);
    for f in ["scene_00002.ply", "ground_truth.json", "models/box.ply"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(
        fs::read(models.join("blob.ply")).unwrap(),
        fs::read(c.join("models/blob.ply")).unwrap()
    );
    assert_ne!(
        fs::read(a.join("scene_00000.ply")).unwrap(),
        fs::read(c.join("scene_00000.ply")).unwrap()
    );
    let artifacts = read_json(&a.join("manifest.json"))["artifacts"]
        .as_array()
        .unwrap()
        .len();
    // models dir, three scenes as ply + json, ground truth
    assert_eq!(artifacts, 1 + 6 + 1);
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    assert_eq!(
        code(&vnpose(&[
            "synth-gen",
            "--scenes",
            "3",
            "--seed",
            "1",
            "-o",
            p(&scenes)
        ])),
        0
    );
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, br#"{"learning_rate": 0.003, "batch_size": 2}"#).unwrap();
    let (a, b) = (dir.path().join("ta"), dir.path().join("tb"));
    for out in [&a, &b] {
        let o = vnpose(&[
            "train",
            "--scenes",
            p(&scenes),
            "--config",
            p(&cfg),
            "--epochs",
            "2",
            "--seed",
            "4",
            "-o",
            p(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        fs::read(a.join("params.bin")).unwrap(),
        fs::read(b.join("params.bin")).unwrap()
    );
    let curve = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 4, "{curve}");
    let m = read_json(&a.join("manifest.json"));
    assert_eq!(m["config"]["train"]["learning_rate"], 0.003);
    assert_eq!(m["config"]["train"]["seed"], 4);

    let ev = dir.path().join("eval");
    let o = vnpose(&["eval", "--scenes", p(&scenes), "--params", p(&a), "-o", p(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ev.join("detections.json").exists() && ev.join("metrics.csv").exists());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, br#"{"batch_size": 0}"#).unwrap();
    let o = vnpose(&[
        "train",
        "--scenes",
        p(&scenes),
        "--config",
        p(&bad),
        "-o",
        p(&dir.path().join("tc")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_reports_the_max_relative_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let o = vnpose(&["gradcheck", "--seed", "5", "-o", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line = String::from_utf8(o.stdout).unwrap();
    let err: f64 = line.trim().strip_prefix("max_rel_error ").unwrap().parse().unwrap();
    assert!(err <= 1e-4);
    let rows = read_json(&out.join("gradcheck.json"));
    assert_eq!(rows.as_array().unwrap().len(), 2);
    let o = vnpose(&["gradcheck", "--seed", "5", "--tolerance", "0", "-o", p(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn backproject_writes_one_point_per_valid_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("depth.pgm");
    let mut bytes = b"P5\n3 2\n65535\n".to_vec();
    for d in [1000u16, 0, 2000, 1500, 0, 500] {
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    fs::write(&pgm, bytes).unwrap();
    let k = dir.path().join("k.json");
    fs::write(&k, br#"{"fx": 500, "fy": 500, "cx": 1, "cy": 0.5}"#).unwrap();
    let out = dir.path().join("bp");
    let o = vnpose(&["backproject", "--depth", p(&pgm), "--intrinsics", p(&k), "-o", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "4 points");
    assert!(fs::read_to_string(out.join("cloud.ply"))
        .unwrap()
        .contains("element vertex 4"));
}
