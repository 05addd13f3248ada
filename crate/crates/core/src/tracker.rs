//! Per-frame camera tracking: Adam on a pose increment against a frozen field,
//! coarse to fine over the image pyramid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Adam, AdamConfig};
use crate::geometry::{Pose, Twist};
use crate::objective::{
    evaluation_pixels, sample_coarse_pixels, FrameBatch, GradRequest, LossConfig, LossParts, Scene,
};
use crate::pyramid::{level_at, level_schedule, FramePyramid, MAX_LEVEL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    /// Level-0 rays rendered per iteration.
    pub rays: usize,
    pub iterations: usize,
    /// Coarsest pyramid level the schedule starts from.
    pub gpl: usize,
    pub lr: f64,
    pub loss: LossConfig,
    /// Size of the fixed level-0 batch used to pick the returned pose.
    pub eval_pixels: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            rays: 1024,
            iterations: 15,
            gpl: 2,
            lr: 1e-3,
            loss: LossConfig::default(),
            eval_pixels: 1024,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays == 0 || self.iterations == 0 || self.eval_pixels == 0 {
            return Err(Error::Config("tracker rays, iterations and eval_pixels must be positive".into()));
        }
        if self.gpl > MAX_LEVEL {
            return Err(Error::Config(format!("tracker gpl must be <= {MAX_LEVEL}")));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("tracker lr must be positive".into()));
        }
        self.loss.validate()
    }
}

/// One optimisation step.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TrackIteration {
    pub level: usize,
    pub loss: LossParts,
    pub rays: usize,
}

#[derive(Clone, Debug)]
pub struct TrackResult {
    pub pose: Pose,
    pub init: Pose,
    /// Loss of the initial and accepted pose on the fixed evaluation batch.
    pub init_loss: f64,
    pub accepted_loss: f64,
    pub iterations: Vec<TrackIteration>,
    /// Set when the frame has no valid depth and only colour drives the pose.
    pub rgb_only: bool,
}

/// Optimises the pose of one frame starting from `init`.
///
/// Each iteration samples coarse pixels at the scheduled level until their
/// level-0 receptive fields cover `cfg.rays` rays, evaluates the loss and takes
/// one Adam step on a left-multiplied twist. The returned pose is the best of
/// the initial pose, the lowest-loss level-0 iterate and the final pose, judged
/// on a fixed level-0 batch.
pub fn track_frame(
    scene: &Scene<'_>,
    pyramid: &FramePyramid,
    init: Pose,
    cfg: &TrackerConfig,
    seed: u64,
) -> Result<TrackResult> {
    cfg.validate()?;
    if pyramid.levels() < cfg.gpl {
        return Err(Error::Config(format!(
            "pyramid stops at level {}, tracking starts at level {}",
            pyramid.levels(),
            cfg.gpl
        )));
    }
    let scene = Scene {
        loss: &cfg.loss,
        ..*scene
    };
    let rgb_only = pyramid.valid[0].iter().all(|v| !v);
    if rgb_only {
        log::warn!("tracking a frame without valid depth; colour term only");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval_batch = evaluation_pixels(&mut rng, pyramid, cfg.eval_pixels);
    let eval_loss = |pose: Pose| -> Result<f64> {
        let batch = [FrameBatch {
            pyramid,
            pose,
            coarse: eval_batch.clone(),
        }];
        Ok(scene.evaluate(0, &batch, GradRequest::NONE)?.loss.total)
    };

    let schedule = level_schedule(cfg.iterations, cfg.gpl);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), 6);
    let mut pose = init;
    let mut best_fine: Option<(f64, Pose)> = None;
    let mut records = Vec::with_capacity(cfg.iterations);
    let want = GradRequest {
        field: false,
        poses: true,
    };
    for it in 0..cfg.iterations {
        let level = level_at(&schedule, it);
        let coarse = sample_coarse_pixels(&mut rng, pyramid, level, cfg.rays);
        let batch = [FrameBatch { pyramid, pose, coarse }];
        let res = scene.evaluate(level, &batch, want)?;
        if level == 0 && best_fine.is_none_or(|(l, _)| res.loss.total < l) {
            best_fine = Some((res.loss.total, pose));
        }
        records.push(TrackIteration {
            level,
            loss: res.loss,
            rays: res.rays,
        });
        let mut delta = [0.0; 6];
        adam.step(&mut delta, &res.pose_grads[0]);
        pose = pose.retract(&Twist::from_slice(&delta));
    }

    let mut candidates = vec![init];
    if let Some((_, p)) = best_fine {
        candidates.push(p);
    }
    candidates.push(pose);
    let mut init_loss = f64::NAN;
    let mut accepted = (f64::INFINITY, init);
    for (i, cand) in candidates.into_iter().enumerate() {
        let l = eval_loss(cand)?;
        if i == 0 {
            init_loss = l;
        }
        if l < accepted.0 {
            accepted = (l, cand);
        }
    }
    Ok(TrackResult {
        pose: accepted.1,
        init,
        init_loss,
        accepted_loss: accepted.0,
        iterations: records,
        rgb_only,
    })
}
