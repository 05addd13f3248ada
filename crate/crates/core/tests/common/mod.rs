//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use nerfslam::config::{DatasetConfig, RunConfig};
use nerfslam::data::{SceneSpec, Sequence};
use nerfslam::geometry::{Intrinsics, Pose, Twist, Vec3};
use nerfslam::mapper::{KeyframeStore, Mapper, MapperConfig, RenderEnv};
use nerfslam::pyramid::FramePyramid;
use nerfslam::renderer::SceneBounds;
use nerfslam::slam::prepare;
use nerfslam::termination::TargetDistribution;
use nerfslam::{FieldConfig, SceneField};

/// A prepared synthetic sequence with everything needed to render it.
pub struct World {
    pub cfg: RunConfig,
    pub seq: Sequence,
    pub bounds: SceneBounds,
    pub field_cfg: FieldConfig,
    pub target: TargetDistribution,
}

/// Desk profile on the default scene, first `frames` frames.
pub fn desk(frames: usize) -> World {
    world(RunConfig::default(), frames)
}

/// The default scene at 40×30 with a lighter field and budgets, for fast tests.
pub fn tiny(frames: usize) -> World {
    let mut cfg = RunConfig::default();
    if let DatasetConfig::Synthetic { spec } = &mut cfg.dataset {
        shrink(spec);
    }
    cfg.field.grid.levels = 8;
    cfg.field.grid.max_resolution = 128.0;
    cfg.tracker.rays = 128;
    cfg.tracker.eval_pixels = 128;
    cfg.mapper.rays = 256;
    cfg.mapper.init_iterations = 40;
    cfg.mapper.local_iterations = 4;
    cfg.mapper.global_iterations = 4;
    cfg.eval.depth_samples = Some(64);
    world(cfg, frames)
}

pub fn shrink(spec: &mut SceneSpec) {
    spec.intrinsics = Intrinsics::new(30.0, 30.0, 20.0, 15.0, 40, 30).unwrap();
}

pub fn world(mut cfg: RunConfig, frames: usize) -> World {
    cfg.max_frames = Some(frames);
    let (cfg, seq) = prepare(&cfg).unwrap();
    let (bounds, field_cfg) = cfg.resolve_field().unwrap();
    let target = TargetDistribution::from_config(&cfg.termination).unwrap();
    World {
        cfg,
        seq,
        bounds,
        field_cfg,
        target,
    }
}

impl World {
    pub fn env(&self) -> RenderEnv<'_> {
        RenderEnv {
            bounds: &self.bounds,
            render: &self.cfg.render,
            kl: self.cfg.termination.target,
            target: &self.target,
            intrinsics: &self.seq.intrinsics,
            chunks: self.cfg.chunks,
        }
    }

    pub fn gt(&self, i: usize) -> Pose {
        self.seq.frames[i].gt_pose.unwrap()
    }

    pub fn pyramid(&self, i: usize) -> FramePyramid {
        let f = &self.seq.frames[i];
        FramePyramid::build(&f.rgb, &f.depth, 3).unwrap()
    }

    pub fn mapper(&self, cfg: MapperConfig) -> Mapper {
        let field = SceneField::new(self.field_cfg.clone(), 1).unwrap();
        Mapper::new(field, self.cfg.render.new_occupancy(&self.bounds), cfg).unwrap()
    }

    /// Fits the field to the listed frames at their ground-truth poses,
    /// starting with `init_iterations` on the first of them.
    pub fn map_at_gt(&self, frames: &[usize], cfg: MapperConfig, steps: usize) -> Mapper {
        let cfg = MapperConfig {
            optimize_poses: false,
            ..cfg
        };
        let mut m = self.mapper(cfg);
        let mut store = KeyframeStore::new(1);
        for &i in frames {
            store
                .maybe_insert(i, self.seq.frames[i].timestamp, self.gt(i), || Ok(self.pyramid(i)))
                .unwrap();
        }
        m.initialize(&self.env(), &store, 5).unwrap();
        for s in 0..steps {
            m.map_step(&self.env(), &mut store, None, 100 + s as u64).unwrap();
        }
        m
    }
}

/// Perturbation of `angle` radians about a random axis and `dist` along a
/// random direction, both from a deterministic stream.
pub fn perturbation(seed: u64, angle: f64, dist: f64) -> Twist {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut unit = || loop {
        let v = Vec3::new(rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0);
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    };
    let axis = unit();
    let dir = unit();
    Twist::new(axis * angle, dir * dist)
}

/// Pose offset by `xi` with the translation part applied in world
/// coordinates, so `dist` is the camera-centre displacement.
pub fn perturb(p: &Pose, xi: &Twist) -> Pose {
    let rot = Pose::new(nerfslam::geometry::exp_map(&Twist::new(xi.omega, Vec3::zeros())).rotation, Vec3::zeros());
    let mut q = rot.compose(&Pose::new(p.rotation, Vec3::zeros()));
    q.translation = p.translation + xi.v;
    q
}
