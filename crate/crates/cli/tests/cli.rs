use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nerfslam::data::{read_trajectory, write_trajectory, TrajectoryEntry};
use nerfslam::eval::ate_rmse;
use nerfslam::geometry::{exp_map, Pose, Twist, Vec3};
use serde_json::{json, Value};

fn nerfslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerfslam"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 40×30 camera on the default scene.
fn small_spec(frames: usize) -> Value {
    json!({
        "intrinsics": {"fx": 30.0, "fy": 30.0, "cx": 20.0, "cy": 15.0, "width": 40, "height": 30},
        "trajectory": {"frames": frames, "loops": 0.1}
    })
}

/// Run config small enough for a smoke test.
fn small_run(frames: usize) -> Value {
    json!({
        "dataset": {"spec": small_spec(frames)},
        "field": {"grid": {"levels": 6, "max_resolution": 64.0}},
        "tracker": {"rays": 64, "iterations": 4, "eval_pixels": 64, "lr": 0.01},
        "mapper": {"rays": 128, "init_iterations": 10, "local_iterations": 2, "global_iterations": 2},
        "eval": {"depth_samples": 32},
        "chunks": 4
    })
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    let mut v = small_spec(6);
    v["noise"] = json!({"depth_std": 0.005, "dropout": 0.02});
    write_json(&spec, &v);
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|n| tmp.path().join(n)).collect();
    for (d, seed) in dirs.iter().zip(["1", "1", "2"]) {
        ok(&nerfslam(&["synth", "--spec", s(&spec), "--out", s(d), "--seed", seed]));
    }
    let a = files_under(&dirs[0]);
    assert_eq!(a, files_under(&dirs[1]));
    assert_eq!(a.iter().filter(|(p, _)| p.starts_with("rgb")).count(), 6);
    assert_eq!(a.iter().filter(|(p, _)| p.starts_with("depth/")).count(), 6);
    let c = files_under(&dirs[2]);
    let depth = |v: &[(PathBuf, Vec<u8>)]| -> Vec<Vec<u8>> {
        v.iter().filter(|(p, _)| p.starts_with("depth/")).map(|(_, b)| b.clone()).collect()
    };
    assert_ne!(depth(&a), depth(&c));
    // Geometry does not depend on the noise seed.
    assert_eq!(fs::read(dirs[0].join("groundtruth.txt")).unwrap(), fs::read(dirs[2].join("groundtruth.txt")).unwrap());
}

#[test]
fn synth_rejects_a_trajectory_through_an_obstacle() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    let mut v = small_spec(4);
    v["trajectory"]["center"] = json!([0.0, -0.75, 0.0]);
    v["trajectory"]["radii"] = json!([0.05, 0.05]);
    write_json(&spec, &v);
    let out = nerfslam(&["synth", "--spec", s(&spec), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn smoke_run_writes_outputs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    write_json(&cfg, &small_run(10));
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let stdout = ok(&nerfslam(&["run", "--config", s(&cfg), "--out", s(&a), "--seed", "3"]));
    let metrics: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(metrics["frames"], 10);
    assert_eq!(metrics["keyframes"], 2);
    assert!(metrics["ate"]["rmse_cm"].as_f64().unwrap().is_finite());

    let traj = fs::read_to_string(a.join("trajectory.txt")).unwrap();
    assert_eq!(traj.lines().count(), 10);
    for name in ["metrics.json", "diagnostics.csv", "checkpoint.bin", "config.json"] {
        assert!(a.join(name).is_file(), "{name} missing");
    }
    let diag = fs::read_to_string(a.join("diagnostics.csv")).unwrap();
    assert!(diag.starts_with("frame,stage,iteration,level,rays,rgb,depth,kl,total"));
    // 10 init rows, 4 per tracked frame, 2 local + 2 global at frame 5.
    assert_eq!(diag.lines().count() - 1, 10 + 9 * 4 + 4);

    ok(&nerfslam(&["run", "--config", s(&cfg), "--out", s(&b), "--seed", "3", "--workers", "2"]));
    assert_eq!(fs::read(a.join("trajectory.txt")).unwrap(), fs::read(b.join("trajectory.txt")).unwrap());

    // The dumped effective config reproduces the run on its own.
    ok(&nerfslam(&["run", "--config", s(&a.join("config.json")), "--out", s(&c)]));
    assert_eq!(fs::read(a.join("trajectory.txt")).unwrap(), fs::read(c.join("trajectory.txt")).unwrap());
    let dumped: Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(dumped["seed"], 3);
    assert!(dumped["scene_box"].is_object());
}

#[test]
fn run_from_a_synthesized_tum_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    write_json(&spec, &small_spec(5));
    let data = tmp.path().join("data");
    ok(&nerfslam(&["synth", "--spec", s(&spec), "--out", s(&data)]));
    let mut run = small_run(5);
    run["dataset"] = json!({"type": "tum", "path": data});
    let cfg = tmp.path().join("run.json");
    write_json(&cfg, &run);
    let out = tmp.path().join("out");
    ok(&nerfslam(&["run", "--config", s(&cfg), "--out", s(&out)]));
    let est = read_trajectory(&out.join("trajectory.txt")).unwrap();
    let gt = read_trajectory(&data.join("groundtruth.txt")).unwrap();
    assert_eq!(est.len(), 5);
    assert_eq!(est[0].timestamp, gt[0].timestamp);
    let metrics: Value = serde_json::from_str(&ok(&nerfslam(&[
        "eval",
        "--est",
        s(&out.join("trajectory.txt")),
        "--gt",
        s(&data.join("groundtruth.txt")),
    ])))
    .unwrap();
    assert_eq!(metrics["pairs"], 5);
}

#[test]
fn exit_codes_separate_config_data_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    let missing = tmp.path().join("nope.json");
    assert_eq!(code(&nerfslam(&["run", "--config", s(&missing), "--out", s(&out)])), 2);

    let bad = tmp.path().join("bad.json");
    write_json(&bad, &json!({"tracker": {"iterationz": 3}}));
    assert_eq!(code(&nerfslam(&["run", "--config", s(&bad), "--out", s(&out)])), 2);
    assert_eq!(code(&nerfslam(&["run", "--profile", "kitti", "--out", s(&out)])), 2);

    let no_data = tmp.path().join("nodata.json");
    write_json(&no_data, &json!({"dataset": {"type": "tum", "path": tmp.path().join("missing")}}));
    assert_eq!(code(&nerfslam(&["run", "--config", s(&no_data), "--out", s(&out)])), 3);

    let garbage = tmp.path().join("garbage.txt");
    fs::write(&garbage, "0.0 1 2 3\n").unwrap();
    assert_eq!(code(&nerfslam(&["eval", "--est", s(&garbage), "--gt", s(&garbage)])), 3);
}

fn square_trajectory(n: usize) -> Vec<TrajectoryEntry> {
    (0..n)
        .map(|i| {
            let th = std::f64::consts::TAU * i as f64 / n as f64;
            let t = Vec3::new(th.cos(), 0.3 * (2.0 * th).sin(), th.sin());
            TrajectoryEntry {
                timestamp: i as f64 / 30.0,
                pose: Pose::new(exp_map(&Twist::new(Vec3::new(0.0, th, 0.0), Vec3::zeros())).rotation, t),
            }
        })
        .collect()
}

fn eval_json(est: &Path, gt: &Path) -> Value {
    serde_json::from_str(&ok(&nerfslam(&["eval", "--est", s(est), "--gt", s(gt)]))).unwrap()
}

#[test]
fn eval_reports_ate_for_identical_transformed_and_displaced_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = square_trajectory(24);
    let gt_path = tmp.path().join("gt.txt");
    write_trajectory(&gt_path, &gt).unwrap();

    let m = eval_json(&gt_path, &gt_path);
    assert!(m["ate_rmse_cm"].as_f64().unwrap() < 1e-9);
    assert_eq!(m["pairs"], 24);

    let g = Pose::new(
        exp_map(&Twist::new(Vec3::new(0.3, -1.1, 0.4), Vec3::zeros())).rotation,
        Vec3::new(2.0, -1.0, 0.5),
    );
    let moved: Vec<TrajectoryEntry> = gt
        .iter()
        .map(|e| TrajectoryEntry {
            timestamp: e.timestamp,
            pose: g.compose(&e.pose),
        })
        .collect();
    let moved_path = tmp.path().join("moved.txt");
    write_trajectory(&moved_path, &moved).unwrap();
    // Files hold 9 decimals, so the fit is exact only to about 1e-9 m.
    assert!(eval_json(&moved_path, &gt_path)["ate_rmse_cm"].as_f64().unwrap() < 1e-5);

    let mut displaced = gt.clone();
    displaced[5].pose.translation += Vec3::new(0.04, 0.0, 0.0);
    let disp_path = tmp.path().join("disp.txt");
    write_trajectory(&disp_path, &displaced).unwrap();
    let expected = ate_rmse(
        &displaced.iter().map(|e| e.pose.translation).collect::<Vec<_>>(),
        &gt.iter().map(|e| e.pose.translation).collect::<Vec<_>>(),
    )
    .unwrap()
    .rmse_cm;
    let got = eval_json(&disp_path, &gt_path)["ate_rmse_cm"].as_f64().unwrap();
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    assert!(got > 0.0 && got < 4.0 / (24f64).sqrt() + 1e-9);
}

fn attr<'a>(svg: &'a str, tag: &str, name: &str) -> Vec<&'a str> {
    svg.split(&format!("<{tag} "))
        .skip(1)
        .filter_map(|chunk| {
            let key = format!("{name}=\"");
            let start = chunk.find(&key)? + key.len();
            let len = chunk[start..].find('"')?;
            Some(&chunk[start..start + len])
        })
        .collect()
}

fn plot(args: &[&str], dir: &Path) -> Output {
    let mut all = vec!["plot", "--out", s(dir)];
    all.extend_from_slice(args);
    nerfslam(&all)
}

#[test]
fn plot_single_point_identical_and_bounded_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let one = tmp.path().join("one.txt");
    write_trajectory(&one, &square_trajectory(1)).unwrap();
    let d1 = tmp.path().join("p1");
    ok(&plot(&["--gt", s(&one)], &d1));
    let svg = fs::read_to_string(d1.join("trajectory.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<circle").count(), 1);
    assert_eq!(svg.matches("<polyline").count(), 0);

    let sq = tmp.path().join("sq.txt");
    write_trajectory(&sq, &square_trajectory(12)).unwrap();
    let d2 = tmp.path().join("p2");
    ok(&plot(&["--gt", s(&sq), "--est", s(&sq)], &d2));
    let svg = fs::read_to_string(d2.join("trajectory.svg")).unwrap();
    let pts = attr(&svg, "polyline", "points");
    let colors = attr(&svg, "polyline", "stroke");
    assert_eq!(pts.len(), 2);
    let parse = |p: &str| -> Vec<f64> { p.split([' ', ',']).map(|v| v.parse().unwrap()).collect() };
    let (g, e) = (parse(pts[0]), parse(pts[1]));
    assert_eq!(g.len(), 24);
    assert!(g.iter().zip(&e).all(|(a, b)| (a - b).abs() < 1e-9), "{g:?} vs {e:?}");
    assert_eq!(colors, ["green", "red"]);

    // Box fixture: x spans [-0.5, 2.0], z spans [1.0, 1.75], y is flat.
    let corners = [(-0.5, 1.0), (2.0, 1.0), (2.0, 1.75), (-0.5, 1.75), (0.25, 1.2)];
    let boxed: Vec<TrajectoryEntry> = corners
        .iter()
        .enumerate()
        .map(|(i, &(x, z))| TrajectoryEntry {
            timestamp: i as f64,
            pose: Pose::from_translation(Vec3::new(x, 0.3, z)),
        })
        .collect();
    let bp = tmp.path().join("box.txt");
    write_trajectory(&bp, &boxed).unwrap();
    let d3 = tmp.path().join("p3");
    ok(&plot(&["--gt", s(&bp)], &d3));
    let svg = fs::read_to_string(d3.join("trajectory.svg")).unwrap();
    let vb: Vec<f64> = attr(&svg, "svg", "viewBox")[0]
        .split(' ')
        .map(|v| v.parse().unwrap())
        .collect();
    let expected = [-0.5, 1.0, 2.5, 0.75];
    for (a, b) in vb.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{vb:?} vs {expected:?}");
    }
}

#[test]
fn plot_loss_curves_and_empty_input() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("diag.csv");
    fs::write(
        &csv,
        "frame,stage,iteration,level,rays,rgb,depth,kl,total\n\
         0,init,0,0,10,0.1,0.2,0.3,4.0\n0,init,1,0,10,0.1,0.2,0.3,2.0\n\
         1,track,0,1,10,0.1,0.2,0.3,1.0\n1,track,1,0,10,0.1,0.2,0.3,0.1\n",
    )
    .unwrap();
    let d = tmp.path().join("plots");
    ok(&plot(&["--diagnostics", s(&csv)], &d));
    let track = fs::read_to_string(d.join("loss_track.svg")).unwrap();
    assert_eq!(attr(&track, "polyline", "points"), ["0,-0 1,1"]);
    assert!(d.join("loss_map.svg").is_file());

    let empty = tmp.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&plot(&["--gt", s(&empty)], &tmp.path().join("e"))), 3);
    assert_eq!(code(&plot(&[], &tmp.path().join("e"))), 2);
}
