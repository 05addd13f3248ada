use proptest::prelude::*;

use super::*;
use crate::data::{generate_synthetic, SceneSpec, Sequence};
use crate::field::{FieldConfig, HashGridConfig};
use crate::termination::TerminationConfig;

#[test]
fn ray_budget_examples() {
    assert_eq!(ray_budget(4, 2048), vec![512; 4]);
    assert_eq!(ray_budget(3, 2048), vec![683, 683, 682]);
    assert_eq!(ray_budget(1, 7), vec![7]);
    assert!(ray_budget(0, 7).is_empty());
}

proptest! {
    #[test]
    fn ray_budget_conserves_total(n in 1usize..50, total in 0usize..10_000) {
        let b = ray_budget(n, total);
        prop_assert_eq!(b.len(), n);
        prop_assert_eq!(b.iter().sum::<usize>(), total);
        prop_assert!(b.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }
}

fn dummy_pyramid() -> Result<FramePyramid> {
    let img = crate::raster::Image::new(8, 8, 3);
    let depth = crate::raster::Image::new(8, 8, 1);
    FramePyramid::build(&img, &depth, 1)
}

#[test]
fn keyframes_at_fixed_interval() {
    let mut store = KeyframeStore::new(5);
    assert!(store.maybe_insert(10, 0.0, Pose::identity(), dummy_pyramid).unwrap());
    assert!(!store.maybe_insert(12, 0.0, Pose::identity(), dummy_pyramid).unwrap());
    assert!(store.maybe_insert(10, 0.0, Pose::identity(), dummy_pyramid).is_err());

    let mut store = KeyframeStore::new(5);
    let mut built = 0;
    for i in 0..100 {
        store
            .maybe_insert(i, i as f64, Pose::identity(), || {
                built += 1;
                dummy_pyramid()
            })
            .unwrap();
    }
    assert_eq!(store.len(), 20);
    assert_eq!(built, 20);
    assert_eq!(store.get(0).index, 0);
    assert!(store.frames().windows(2).all(|w| w[0].index < w[1].index));
}

pub(crate) struct Fixture {
    pub seq: Sequence,
    pub bounds: SceneBounds,
    pub render: RenderConfig,
    pub target: TargetDistribution,
    pub field_cfg: FieldConfig,
}

pub(crate) fn fixture(frames: usize) -> Fixture {
    let mut s = SceneSpec::default();
    s.trajectory.frames = frames;
    s.trajectory.loops = frames as f64 / 100.0;
    s.intrinsics = Intrinsics::new(30.0, 30.0, 20.0, 15.0, 40, 30).unwrap();
    let seq = generate_synthetic(&s).unwrap();
    let bounds = seq.scene_box.unwrap().bounds(0.05).unwrap();
    let term = TerminationConfig::default();
    Fixture {
        seq,
        bounds,
        render: RenderConfig::default(),
        target: TargetDistribution::from_config(&term).unwrap(),
        field_cfg: FieldConfig {
            grid: HashGridConfig {
                levels: 8,
                features_per_level: 2,
                min_resolution: 16.0,
                max_resolution: 128.0,
                log2_table_size: 14,
            },
            ..FieldConfig::default()
        },
    }
}

impl Fixture {
    fn env(&self) -> RenderEnv<'_> {
        RenderEnv {
            bounds: &self.bounds,
            render: &self.render,
            kl: KlTarget::Custom,
            target: &self.target,
            intrinsics: &self.seq.intrinsics,
            chunks: 8,
        }
    }

    fn mapper(&self, cfg: MapperConfig) -> Mapper {
        let field = SceneField::new(self.field_cfg.clone(), 1).unwrap();
        Mapper::new(field, self.render.new_occupancy(&self.bounds), cfg).unwrap()
    }

    fn store(&self, noise: f64) -> KeyframeStore {
        let mut store = KeyframeStore::new(1);
        for f in &self.seq.frames {
            let mut pose = f.gt_pose.unwrap();
            if f.index > 0 && noise > 0.0 {
                let k = f.index as f64;
                pose = pose.retract(&Twist::from_slice(&[noise, -noise, 0.5 * noise, noise * k.sin(), noise, -noise]));
            }
            store
                .maybe_insert(f.index, f.timestamp, pose, || FramePyramid::build(&f.rgb, &f.depth, 2))
                .unwrap();
        }
        store
    }
}

fn small_cfg() -> MapperConfig {
    MapperConfig {
        rays: 256,
        local_iterations: 4,
        global_iterations: 5,
        window: 3,
        pose_period: 3,
        init_iterations: 5,
        gpl: 1,
        ..MapperConfig::default()
    }
}

#[test]
fn keyframe_zero_is_frozen_and_poses_move_on_schedule() {
    let fx = fixture(4);
    let mut store = fx.store(0.01);
    let before: Vec<Pose> = store.frames().iter().map(|k| k.pose).collect();
    let mut m = fx.mapper(small_cfg());
    m.initialize(&fx.env(), &store, 0).unwrap();
    assert_eq!(store.get(0).pose, before[0]);
    let report = m.map_step(&fx.env(), &mut store, None, 1).unwrap();
    assert_eq!(report.iterations.len(), 9);
    assert_eq!(store.get(0).pose, before[0]);
    for (i, it) in report.iterations.iter().enumerate() {
        assert_eq!(it.poses_updated, (i + 1) % 3 == 0, "iteration {i}");
    }
    assert!(store.frames()[1..].iter().zip(&before[1..]).all(|(k, b)| k.pose != *b));
}

#[test]
fn poses_unchanged_before_the_first_period() {
    let fx = fixture(3);
    let mut store = fx.store(0.01);
    let before: Vec<Pose> = store.frames().iter().map(|k| k.pose).collect();
    let cfg = MapperConfig {
        local_iterations: 2,
        global_iterations: 2,
        pose_period: 5,
        ..small_cfg()
    };
    let mut m = fx.mapper(cfg);
    let checksum = m.field.checksum();
    m.map_step(&fx.env(), &mut store, None, 1).unwrap();
    assert_ne!(m.field.checksum(), checksum);
    let after: Vec<Pose> = store.frames().iter().map(|k| k.pose).collect();
    assert_eq!(after, before);
}

#[test]
fn local_window_holds_recent_keyframes_and_current_frame() {
    let fx = fixture(6);
    let mut store = fx.store(0.0);
    let extra = &fx.seq.frames[5];
    // Drop the last keyframe and treat its frame as the current one.
    store.frames.pop();
    let pyr = FramePyramid::build(&extra.rgb, &extra.depth, 2).unwrap();
    let mut cur = CurrentFrame {
        index: 5,
        pyramid: &pyr,
        pose: extra.gt_pose.unwrap(),
    };
    let mut m = fx.mapper(small_cfg());
    let report = m.map_step(&fx.env(), &mut store, Some(&mut cur), 3).unwrap();
    for it in &report.iterations {
        let mut frames: Vec<Option<usize>> = it.active.iter().map(|a| a.0).collect();
        frames.sort();
        match it.phase {
            Phase::Local => assert_eq!(frames, vec![None, Some(3), Some(4)]),
            Phase::Global => assert_eq!(frames, (0..5).map(Some).collect::<Vec<_>>()),
            Phase::Init => unreachable!(),
        }
        assert_eq!(it.active.iter().map(|a| a.1).sum::<usize>(), 256);
    }
}

#[test]
fn global_phase_touches_every_keyframe_with_few_rays() {
    let fx = fixture(6);
    let mut store = fx.store(0.0);
    let cfg = MapperConfig {
        rays: 4,
        local_iterations: 0,
        global_iterations: 6,
        ..small_cfg()
    };
    let mut m = fx.mapper(cfg);
    let report = m.map_step(&fx.env(), &mut store, None, 0).unwrap();
    let mut touched = [false; 6];
    for it in &report.iterations {
        assert_eq!(it.phase, Phase::Global);
        for a in &it.active {
            touched[a.0.unwrap()] = true;
        }
    }
    assert!(touched.iter().all(|t| *t));
}

#[test]
fn single_keyframe_mapping_reduces_loss() {
    let fx = fixture(1);
    let store = fx.store(0.0);
    let cfg = MapperConfig {
        rays: 512,
        init_iterations: 60,
        ..small_cfg()
    };
    let mut m = fx.mapper(cfg);
    let report = m.initialize(&fx.env(), &store, 0).unwrap();
    let losses: Vec<f64> = report.iterations.iter().map(|i| i.loss.total).collect();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}
