//! The frame loop: map the first frame, then for every later frame track,
//! maybe promote to keyframe and periodically run a map step.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::{DatasetConfig, RunConfig};
use crate::data::{generate_synthetic, load_tum, write_trajectory, Sequence, TrajectoryEntry};
use crate::error::{io_err, Error, Result};
use crate::eval::{depth_l1, Ate, DepthL1, TrajectoryPair};
use crate::field::{save_checkpoint, SceneField};
use crate::geometry::{constant_speed_init, Pose};
use crate::mapper::{CurrentFrame, KeyframeStore, MapReport, Mapper, MapperConfig, Phase, RenderEnv};
use crate::objective::LossParts;
use crate::pyramid::FramePyramid;
use crate::renderer::{OccupancyGrid, SceneBounds};
use crate::termination::TargetDistribution;
use crate::tracker::{track_frame, TrackResult};

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const METRICS_FILE: &str = "metrics.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";

/// Loads the dataset named by the config and fills in `scene_box` from it
/// when the config leaves it open.
pub fn prepare(cfg: &RunConfig) -> Result<(RunConfig, Sequence)> {
    cfg.validate()?;
    let mut seq = match &cfg.dataset {
        DatasetConfig::Tum { path } => load_tum(path)?,
        DatasetConfig::Synthetic { spec } => generate_synthetic(spec)?,
    };
    if let Some(n) = cfg.max_frames {
        seq.truncate(n);
    }
    let mut cfg = cfg.clone();
    if cfg.scene_box.is_none() {
        cfg.scene_box = seq.scene_box;
    }
    if cfg.scene_box.is_none() {
        return Err(Error::Config(
            "scene_box must be set: the dataset does not describe its extent".into(),
        ));
    }
    cfg.validate()?;
    Ok((cfg, seq))
}

/// One row of the per-iteration loss log.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct DiagnosticRow {
    pub frame: usize,
    /// `track`, `init`, `local` or `global`.
    pub stage: &'static str,
    pub iteration: usize,
    pub level: usize,
    pub rays: usize,
    pub rgb: f64,
    pub depth: f64,
    pub kl: f64,
    pub total: f64,
}

impl DiagnosticRow {
    fn new(frame: usize, stage: &'static str, iteration: usize, level: usize, rays: usize, l: &LossParts) -> Self {
        Self {
            frame,
            stage,
            iteration,
            level,
            rays,
            rgb: l.rgb,
            depth: l.depth,
            kl: l.kl,
            total: l.total,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub frames: usize,
    pub keyframes: usize,
    pub dropped_frames: usize,
    pub ate: Option<Ate>,
    pub depth_l1: Option<DepthL1>,
    /// Frames whose tracking ran on colour alone.
    pub rgb_only_frames: Vec<usize>,
    pub scene_diameter: Option<f64>,
    pub mean_depth: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: RunConfig,
    pub trajectory: Vec<TrajectoryEntry>,
    pub metrics: Metrics,
    pub diagnostics: Vec<DiagnosticRow>,
    pub field: SceneField,
    pub bounds: SceneBounds,
}

impl RunOutput {
    pub fn poses(&self) -> Vec<Pose> {
        self.trajectory.iter().map(|e| e.pose).collect()
    }

    /// Writes every output file into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_trajectory(&dir.join(TRAJECTORY_FILE), &self.trajectory)?;
        let metrics = dir.join(METRICS_FILE);
        std::fs::write(&metrics, serde_json::to_string_pretty(&self.metrics)? + "\n").map_err(io_err(&metrics))?;
        write_diagnostics(&dir.join(DIAGNOSTICS_FILE), &self.diagnostics)?;
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &self.field, &checkpoint_meta(&self.config, &self.trajectory, &self.bounds)?)?;
        self.config.save(&dir.join(CONFIG_FILE))
    }
}

fn checkpoint_meta(cfg: &RunConfig, traj: &[TrajectoryEntry], bounds: &SceneBounds) -> Result<serde_json::Value> {
    let poses: Vec<(f64, [f64; 12])> = traj.iter().map(|e| (e.timestamp, e.pose.to_array())).collect();
    Ok(serde_json::json!({
        "frames": traj.len(),
        "bounds": bounds,
        "config": cfg,
        "poses": poses,
    }))
}

pub fn write_diagnostics(path: &Path, rows: &[DiagnosticRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

/// Deterministic per-purpose seed.
fn derive_seed(seed: u64, frame: usize, purpose: u64) -> u64 {
    let mut z = seed
        ^ (frame as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ purpose.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn map_rows(frame: usize, report: &MapReport, out: &mut Vec<DiagnosticRow>) {
    let mut counters = [0usize; 3];
    for it in &report.iterations {
        let (stage, k) = match it.phase {
            Phase::Init => ("init", 0),
            Phase::Local => ("local", 1),
            Phase::Global => ("global", 2),
        };
        out.push(DiagnosticRow::new(frame, stage, counters[k], it.level, it.rays, &it.loss));
        counters[k] += 1;
    }
}

fn track_rows(frame: usize, r: &TrackResult, out: &mut Vec<DiagnosticRow>) {
    for (i, it) in r.iterations.iter().enumerate() {
        out.push(DiagnosticRow::new(frame, "track", i, it.level, it.rays, &it.loss));
    }
}

/// Runs the full pipeline on a prepared config and sequence.
///
/// `out`, when given, also receives periodic checkpoints during the run.
pub fn run(cfg: &RunConfig, seq: &Sequence, out: Option<&Path>) -> Result<RunOutput> {
    let start = Instant::now();
    cfg.validate()?;
    if seq.is_empty() {
        return Err(Error::Dataset("sequence has no frames".into()));
    }
    let (bounds, field_cfg) = cfg.resolve_field()?;
    let target = TargetDistribution::from_config(&cfg.termination)?;
    let chunks = if cfg.deterministic {
        cfg.chunks
    } else {
        rayon::current_num_threads().max(1)
    };
    let env = RenderEnv {
        bounds: &bounds,
        render: &cfg.render,
        kl: cfg.termination.target,
        target: &target,
        intrinsics: &seq.intrinsics,
        chunks,
    };
    let mcfg: MapperConfig = cfg.mapper.clone();
    let levels = cfg.tracker.gpl.max(mcfg.gpl).max(mcfg.init_gpl);
    let build = |i: usize| FramePyramid::build(&seq.frames[i].rgb, &seq.frames[i].depth, levels);

    let field = SceneField::new(field_cfg, derive_seed(cfg.seed, 0, 1))?;
    let mut occ_cfg = mcfg.occupancy;
    occ_cfg.seed ^= derive_seed(cfg.seed, 0, 2);
    let occupancy: OccupancyGrid = cfg.render.new_occupancy(&bounds);
    let mut mapper = Mapper::new(field, occupancy, MapperConfig { occupancy: occ_cfg, ..mcfg.clone() })?;
    let mut store = KeyframeStore::new(mcfg.keyframe_interval);
    let mut diagnostics = Vec::new();

    let first = &seq.frames[0];
    let pose0 = match (cfg.gt_first_pose, first.gt_pose) {
        (true, Some(p)) => p,
        _ => Pose::identity(),
    };
    let mut poses = vec![pose0];
    store.maybe_insert(0, first.timestamp, pose0, || build(0))?;
    let report = mapper.initialize(&env, &store, derive_seed(cfg.seed, 0, 3))?;
    map_rows(0, &report, &mut diagnostics);
    log::info!(
        "frame 0 mapped: loss {:.4} after {} iterations",
        report.iterations.last().map_or(f64::NAN, |i| i.loss.total),
        report.iterations.len()
    );

    let mut rgb_only = Vec::new();
    for i in 1..seq.len() {
        let frame = &seq.frames[i];
        let t0 = Instant::now();
        let pyramid = build(i)?;
        let init = constant_speed_init(&poses[poses.len().saturating_sub(2)..]);
        let tracked = {
            let scene = env.scene(&mapper.field, Some(&mapper.occupancy), &cfg.tracker.loss);
            track_frame(&scene, &pyramid, init, &cfg.tracker, derive_seed(cfg.seed, i, 4))?
        };
        track_rows(i, &tracked, &mut diagnostics);
        if tracked.rgb_only {
            rgb_only.push(i);
        }
        log::info!(
            "frame {i} tracked: loss {:.4} -> {:.4} ({} ms)",
            tracked.init_loss,
            tracked.accepted_loss,
            t0.elapsed().as_millis()
        );
        poses.push(tracked.pose);

        let mut pyramid = Some(pyramid);
        let is_key = store.maybe_insert(i, frame.timestamp, tracked.pose, || {
            Ok(pyramid.take().expect("pyramid consumed once"))
        })?;
        if mcfg.is_map_frame(i) {
            let t1 = Instant::now();
            let report = if is_key {
                mapper.map_step(&env, &mut store, None, derive_seed(cfg.seed, i, 5))?
            } else {
                let pyr = pyramid.as_ref().expect("non-key frame keeps its pyramid");
                let mut cur = CurrentFrame {
                    index: i,
                    pyramid: pyr,
                    pose: tracked.pose,
                };
                mapper.map_step(&env, &mut store, Some(&mut cur), derive_seed(cfg.seed, i, 5))?
            };
            map_rows(i, &report, &mut diagnostics);
            for kf in store.frames() {
                poses[kf.index] = kf.pose;
            }
            log::info!(
                "frame {i} map step: loss {:.4} ({} keyframes, {} ms)",
                report.iterations.last().map_or(f64::NAN, |it| it.loss.total),
                store.len(),
                t1.elapsed().as_millis()
            );
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && i % cfg.checkpoint_every == 0 {
                let traj = entries(seq, &poses);
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
                save_checkpoint(
                    &dir.join(format!("checkpoint_{i:06}.bin")),
                    &mapper.field,
                    &checkpoint_meta(cfg, &traj, &bounds)?,
                )?;
            }
        }
    }

    let trajectory = entries(seq, &poses);
    let ate = match seq.gt_poses() {
        Some(gt) if gt.len() >= 3 => match TrajectoryPair::by_index(poses.clone(), gt).ate() {
            Ok(a) => Some(a),
            Err(e) => {
                log::warn!("ATE unavailable: {e}");
                None
            }
        },
        _ => None,
    };
    let views: Vec<(Pose, &crate::data::Frame)> = (0..seq.len())
        .step_by(cfg.eval.depth_every)
        .map(|i| (poses[i], &seq.frames[i]))
        .collect();
    let depth = {
        let scene = env.scene(&mapper.field, Some(&mapper.occupancy), &cfg.mapper.loss);
        match depth_l1(&scene, &views, cfg.eval.depth_samples, derive_seed(cfg.seed, 0, 6)) {
            Ok(d) => Some(d),
            Err(Error::NoValidPixels) => None,
            Err(e) => return Err(e),
        }
    };
    let metrics = Metrics {
        frames: seq.len(),
        keyframes: store.len(),
        dropped_frames: seq.dropped,
        ate,
        depth_l1: depth,
        rgb_only_frames: rgb_only,
        scene_diameter: cfg.scene_box.map(|b| b.diameter()),
        mean_depth: seq.mean_depth(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        config: cfg.clone(),
        trajectory,
        metrics,
        diagnostics,
        field: mapper.field,
        bounds,
    })
}

fn entries(seq: &Sequence, poses: &[Pose]) -> Vec<TrajectoryEntry> {
    poses
        .iter()
        .zip(&seq.frames)
        .map(|(p, f)| TrajectoryEntry {
            timestamp: f.timestamp,
            pose: *p,
        })
        .collect()
}
