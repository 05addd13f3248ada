//! Keyframes and joint optimisation of the field and keyframe poses.
//!
//! A map step runs a local phase over the most recent keyframes plus the
//! current frame, then a global phase over every keyframe. The field takes an
//! Adam step every iteration; pose gradients are summed and applied every
//! `pose_period` iterations. The first keyframe's pose never moves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Adam, AdamConfig, SceneField};
use crate::geometry::{Intrinsics, Pose, Twist};
use crate::objective::{sample_coarse_pixels, FrameBatch, GradRequest, LossConfig, LossParts, Scene};
use crate::pyramid::{level_at, level_schedule, FramePyramid, MAX_LEVEL};
use crate::renderer::{OccupancyGrid, OccupancyUpdate, RenderConfig, SceneBounds};
use crate::termination::{KlTarget, TargetDistribution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperConfig {
    /// Level-0 rays per iteration, split across the active frames.
    pub rays: usize,
    pub local_iterations: usize,
    pub global_iterations: usize,
    /// Local window size: this many frames including the current one.
    pub window: usize,
    /// Pose gradients are applied every `pose_period` iterations.
    pub pose_period: usize,
    /// Frames between map steps.
    pub map_every: usize,
    pub keyframe_interval: usize,
    pub pose_lr: f64,
    pub field_lr: f64,
    pub loss: LossConfig,
    pub gpl: usize,
    /// Iterations spent on the first frame alone.
    pub init_iterations: usize,
    pub init_gpl: usize,
    /// When false, keyframe poses are held fixed.
    pub optimize_poses: bool,
    pub occupancy: OccupancyUpdate,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            rays: 2048,
            local_iterations: 15,
            global_iterations: 15,
            window: 5,
            pose_period: 5,
            map_every: 5,
            keyframe_interval: 5,
            pose_lr: 5e-4,
            field_lr: 1e-2,
            loss: LossConfig::default(),
            gpl: 2,
            init_iterations: 100,
            init_gpl: 0,
            optimize_poses: true,
            occupancy: OccupancyUpdate::default(),
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rays", self.rays),
            ("pose_period", self.pose_period),
            ("map_every", self.map_every),
            ("keyframe_interval", self.keyframe_interval),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("mapper {name} must be positive")));
            }
        }
        if self.window < 2 {
            return Err(Error::Config("mapper window must be >= 2".into()));
        }
        if self.local_iterations + self.global_iterations == 0 {
            return Err(Error::Config("mapper needs at least one iteration per step".into()));
        }
        if self.gpl > MAX_LEVEL || self.init_gpl > MAX_LEVEL {
            return Err(Error::Config(format!("mapper gpl must be <= {MAX_LEVEL}")));
        }
        if !(self.pose_lr > 0.0 && self.field_lr > 0.0) {
            return Err(Error::Config("mapper learning rates must be positive".into()));
        }
        if !(self.occupancy.decay > 0.0 && self.occupancy.decay <= 1.0) || self.occupancy.probes == 0 {
            return Err(Error::Config("occupancy needs probes > 0 and decay in (0, 1]".into()));
        }
        self.loss.validate()
    }

    pub fn is_keyframe(&self, index: usize) -> bool {
        index.is_multiple_of(self.keyframe_interval)
    }

    pub fn is_map_frame(&self, index: usize) -> bool {
        index.is_multiple_of(self.map_every)
    }
}

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub index: usize,
    pub timestamp: f64,
    pub pose: Pose,
    pub pyramid: FramePyramid,
}

/// Keyframes in increasing frame order.
#[derive(Clone, Debug, Default)]
pub struct KeyframeStore {
    pub interval: usize,
    frames: Vec<Keyframe>,
}

impl KeyframeStore {
    pub fn new(interval: usize) -> Self {
        Self {
            interval,
            frames: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Keyframe] {
        &self.frames
    }

    pub fn get(&self, i: usize) -> &Keyframe {
        &self.frames[i]
    }

    pub fn last(&self) -> Option<&Keyframe> {
        self.frames.last()
    }

    /// Inserts the frame when its index is a multiple of the interval. The
    /// pyramid is built only on insertion.
    pub fn maybe_insert(
        &mut self,
        index: usize,
        timestamp: f64,
        pose: Pose,
        pyramid: impl FnOnce() -> Result<FramePyramid>,
    ) -> Result<bool> {
        if !index.is_multiple_of(self.interval) {
            return Ok(false);
        }
        if self.frames.last().is_some_and(|k| k.index >= index) {
            return Err(Error::Contract(format!("keyframe {index} is not after the last keyframe")));
        }
        self.frames.push(Keyframe {
            index,
            timestamp,
            pose,
            pyramid: pyramid()?,
        });
        Ok(true)
    }
}

/// Splits `total` rays over `n` frames; the first `total % n` frames get one extra.
pub fn ray_budget(n: usize, total: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let (base, extra) = (total / n, total % n);
    (0..n).map(|i| base + usize::from(i < extra)).collect()
}

/// Rendering state shared by every map and track call.
#[derive(Clone, Copy)]
pub struct RenderEnv<'a> {
    pub bounds: &'a SceneBounds,
    pub render: &'a RenderConfig,
    pub kl: KlTarget,
    pub target: &'a TargetDistribution,
    pub intrinsics: &'a Intrinsics,
    pub chunks: usize,
}

impl<'a> RenderEnv<'a> {
    pub fn scene(
        &self,
        field: &'a SceneField,
        occupancy: Option<&'a OccupancyGrid>,
        loss: &'a LossConfig,
    ) -> Scene<'a> {
        Scene {
            field,
            max_level: None,
            bounds: self.bounds,
            render: self.render,
            occupancy,
            kl: self.kl,
            target: self.target,
            loss,
            intrinsics: self.intrinsics,
            chunks: self.chunks,
        }
    }
}

/// A tracked frame that is not (yet) a keyframe.
#[derive(Clone, Debug)]
pub struct CurrentFrame<'a> {
    pub index: usize,
    pub pyramid: &'a FramePyramid,
    pub pose: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Local,
    Global,
}

#[derive(Clone, Debug, Serialize)]
pub struct MapIteration {
    pub phase: Phase,
    pub level: usize,
    pub loss: LossParts,
    pub rays: usize,
    /// Keyframe store indices of the active frames, with `None` for the current frame.
    #[serde(skip)]
    pub active: Vec<(Option<usize>, usize)>,
    pub poses_updated: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MapReport {
    pub iterations: Vec<MapIteration>,
}

/// Owns the field, its optimiser state and the occupancy grid.
pub struct Mapper {
    pub field: SceneField,
    pub occupancy: OccupancyGrid,
    field_adam: Adam,
    pub cfg: MapperConfig,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Slot {
    Key(usize),
    Current,
}

impl Mapper {
    pub fn new(field: SceneField, occupancy: OccupancyGrid, cfg: MapperConfig) -> Result<Self> {
        cfg.validate()?;
        let field_adam = Adam::new(AdamConfig::with_lr(cfg.field_lr), field.num_params());
        Ok(Self {
            field,
            occupancy,
            field_adam,
            cfg,
        })
    }

    pub fn field_steps(&self) -> u64 {
        self.field_adam.steps()
    }

    /// Fits the field to the first keyframe alone with its pose held fixed.
    pub fn initialize(&mut self, env: &RenderEnv<'_>, store: &KeyframeStore, seed: u64) -> Result<MapReport> {
        if store.is_empty() {
            return Err(Error::Contract("initialisation needs the first keyframe".into()));
        }
        let kf = store.get(0);
        let schedule = level_schedule(self.cfg.init_iterations, self.cfg.init_gpl);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = MapReport::default();
        for it in 0..self.cfg.init_iterations {
            let level = level_at(&schedule, it);
            let coarse = sample_coarse_pixels(&mut rng, &kf.pyramid, level, self.cfg.rays);
            let batch = [FrameBatch {
                pyramid: &kf.pyramid,
                pose: kf.pose,
                coarse,
            }];
            let res = {
                let scene = env.scene(&self.field, Some(&self.occupancy), &self.cfg.loss);
                scene.evaluate(level, &batch, GradRequest { field: true, poses: false })?
            };
            self.field_adam
                .step(self.field.params_mut(), res.field_grad.as_deref().expect("field gradient requested"));
            report.iterations.push(MapIteration {
                phase: Phase::Init,
                level,
                loss: res.loss,
                rays: res.rays,
                active: vec![(Some(0), self.cfg.rays)],
                poses_updated: false,
            });
            // The grid starts fully occupied; clearing it early keeps the
            // first iterations from marching through empty space.
            if it == 0 || (it + 1) % 10 == 0 {
                self.refresh_occupancy()?;
            }
        }
        self.refresh_occupancy()?;
        Ok(report)
    }

    fn refresh_occupancy(&mut self) -> Result<()> {
        self.occupancy = self.occupancy.update(&self.field, &self.cfg.occupancy)?;
        Ok(())
    }

    /// Runs one local plus global bundle-adjustment step.
    ///
    /// `current` joins the local window when it is not already the newest
    /// keyframe; its refined pose is written back but only matters to the
    /// caller if the frame later becomes a keyframe.
    pub fn map_step(
        &mut self,
        env: &RenderEnv<'_>,
        store: &mut KeyframeStore,
        mut current: Option<&mut CurrentFrame<'_>>,
        seed: u64,
    ) -> Result<MapReport> {
        if store.is_empty() {
            return Err(Error::Contract("map step needs at least one keyframe".into()));
        }
        let cfg = self.cfg.clone();
        let n_key = store.len();
        let current_is_key = match &current {
            Some(c) => store.last().is_some_and(|k| k.index == c.index),
            None => true,
        };
        let local: Vec<Slot> = if current_is_key {
            (n_key.saturating_sub(cfg.window)..n_key).map(Slot::Key).collect()
        } else {
            (n_key.saturating_sub(cfg.window - 1)..n_key)
                .map(Slot::Key)
                .chain(std::iter::once(Slot::Current))
                .collect()
        };
        let global: Vec<Slot> = (0..n_key).map(Slot::Key).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pose_adam: Vec<Option<Adam>> = vec![None; n_key + 1];
        let mut acc = vec![[0.0f64; 6]; n_key + 1];
        let slot_id = |s: Slot| match s {
            Slot::Key(i) => i,
            Slot::Current => n_key,
        };
        let local_sched = level_schedule(cfg.local_iterations, cfg.gpl);
        let global_sched = level_schedule(cfg.global_iterations, cfg.gpl);
        let total = cfg.local_iterations + cfg.global_iterations;
        let mut report = MapReport::default();

        for it in 0..total {
            let (phase, slots, level, rot) = if it < cfg.local_iterations {
                (Phase::Local, &local, level_at(&local_sched, it), it)
            } else {
                let j = it - cfg.local_iterations;
                (Phase::Global, &global, level_at(&global_sched, j), j)
            };
            // Rotating the frame order spreads the remainder rays over the phase.
            let n = slots.len();
            let budgets = ray_budget(n, cfg.rays);
            let mut order: Vec<(Slot, usize)> = Vec::with_capacity(n);
            for (k, b) in budgets.into_iter().enumerate() {
                if b > 0 {
                    order.push((slots[(k + rot) % n], b));
                }
            }

            let pose_of = |s: Slot, store: &KeyframeStore, cur: &Option<&mut CurrentFrame<'_>>| match s {
                Slot::Key(i) => store.get(i).pose,
                Slot::Current => cur.as_ref().expect("current frame in window").pose,
            };
            let mut batches = Vec::with_capacity(order.len());
            for &(s, b) in &order {
                let pyramid = match s {
                    Slot::Key(i) => &store.get(i).pyramid,
                    Slot::Current => current.as_ref().expect("current frame in window").pyramid,
                };
                batches.push(FrameBatch {
                    pyramid,
                    pose: pose_of(s, store, &current),
                    coarse: sample_coarse_pixels(&mut rng, pyramid, level, b),
                });
            }
            let res = {
                let scene = env.scene(&self.field, Some(&self.occupancy), &cfg.loss);
                scene.evaluate(
                    level,
                    &batches,
                    GradRequest {
                        field: true,
                        poses: cfg.optimize_poses,
                    },
                )?
            };
            drop(batches);
            self.field_adam
                .step(self.field.params_mut(), res.field_grad.as_deref().expect("field gradient requested"));

            if cfg.optimize_poses {
                for (&(s, _), g) in order.iter().zip(&res.pose_grads) {
                    if s == Slot::Key(0) {
                        continue;
                    }
                    let a = &mut acc[slot_id(s)];
                    for (ai, gi) in a.iter_mut().zip(g) {
                        *ai += gi;
                    }
                }
            }
            let update = cfg.optimize_poses && (it + 1) % cfg.pose_period == 0;
            if update {
                for id in 1..=n_key {
                    if acc[id] == [0.0; 6] {
                        continue;
                    }
                    let adam = pose_adam[id].get_or_insert_with(|| Adam::new(AdamConfig::with_lr(cfg.pose_lr), 6));
                    let mut delta = [0.0; 6];
                    adam.step(&mut delta, &acc[id]);
                    let xi = Twist::from_slice(&delta);
                    if id == n_key {
                        if let Some(c) = current.as_deref_mut() {
                            c.pose = c.pose.retract(&xi);
                        }
                    } else {
                        let kf = &mut store.frames[id];
                        kf.pose = kf.pose.retract(&xi);
                    }
                    acc[id] = [0.0; 6];
                }
            }
            report.iterations.push(MapIteration {
                phase,
                level,
                loss: res.loss,
                rays: res.rays,
                active: order
                    .iter()
                    .map(|&(s, b)| {
                        (
                            match s {
                                Slot::Key(i) => Some(i),
                                Slot::Current => None,
                            },
                            b,
                        )
                    })
                    .collect(),
                poses_updated: update,
            });
        }
        self.refresh_occupancy()?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests;
