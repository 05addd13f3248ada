//! The frame-batch loss `L = L_rgb + λ_d L_d + λ_KL L_KL` shared by tracking
//! and mapping, with its gradient on field parameters and camera poses.
//!
//! A batch holds one or more frames, each with a pose, a ground-truth pyramid
//! and a set of coarse pixels at the current level. The level-0 pixels in the
//! union of their receptive fields are rendered once; every coarse pixel is
//! then reduced from its rendered patch and compared with the ground-truth
//! pyramid.
//!
//! * `L_rgb` is the mean squared color error over coarse pixels and channels.
//! * `L_d` is the mean absolute z-depth error over coarse pixels with valid
//!   ground-truth depth.
//! * `L_KL` is the mean per-ray cross-entropy against the target termination
//!   distribution, over rendered rays with valid level-0 depth.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{MaxLevelField, SceneField};
use crate::geometry::{pixel_to_ray, Intrinsics, Pose, Ray};
use crate::pyramid::{coarse_pixel_loss, receptive_field, FramePyramid, PixelLossWeights};
use crate::renderer::{
    backward_ray, render_ray, OccupancyGrid, RayRender, RayUpstream, RenderConfig, SampleWindow, SceneBounds,
};
use crate::termination::{kl_ray, ray_targets, KlTarget, TargetDistribution};

/// Half-width of the no-skip window around a measured depth, in units of σ_d.
pub const GUARD_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_d: f64,
    pub lambda_kl: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_kl: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_d >= 0.0 && self.lambda_kl >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Read-only state needed to evaluate the loss.
#[derive(Clone, Copy)]
pub struct Scene<'a> {
    pub field: &'a SceneField,
    /// Restricts the field to its first levels when set.
    pub max_level: Option<usize>,
    pub bounds: &'a SceneBounds,
    pub render: &'a RenderConfig,
    pub occupancy: Option<&'a OccupancyGrid>,
    pub kl: KlTarget,
    pub target: &'a TargetDistribution,
    pub loss: &'a LossConfig,
    pub intrinsics: &'a Intrinsics,
    /// Fixed number of gradient partial sums; the result does not depend on
    /// the worker count.
    pub chunks: usize,
}

/// One frame's share of a batch.
#[derive(Clone, Debug)]
pub struct FrameBatch<'a> {
    pub pyramid: &'a FramePyramid,
    pub pose: Pose,
    /// Coarse pixels at the batch level.
    pub coarse: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub rgb: f64,
    pub depth: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BatchResult {
    pub loss: LossParts,
    /// Present when field gradients were requested.
    pub field_grad: Option<Vec<f64>>,
    /// Left-multiplied twist gradient `[omega, v]` per frame, when requested.
    pub pose_grads: Vec<[f64; 6]>,
    pub rays: usize,
    pub coarse_pixels: usize,
    pub depth_pixels: usize,
    pub kl_rays: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub field: bool,
    pub poses: bool,
}

impl GradRequest {
    pub const NONE: Self = Self {
        field: false,
        poses: false,
    };
}

struct RayJob {
    frame: usize,
    ray: Ray,
    /// z-depth per unit ray distance at this pixel.
    cos: f64,
    /// Measured ray distance, when the pixel has valid depth.
    range: Option<f64>,
}

/// Samples coarse pixels at `level` uniformly without replacement until the
/// union of their level-0 receptive fields holds at least `budget` pixels
/// (always at least one coarse pixel).
pub fn sample_coarse_pixels<R: Rng>(
    rng: &mut R,
    pyramid: &FramePyramid,
    level: usize,
    budget: usize,
) -> Vec<(usize, usize)> {
    let dims = pyramid.dims();
    let (w, h) = dims[level];
    let (w0, h0) = dims[0];
    let mut order: Vec<usize> = (0..w * h).collect();
    let mut covered = vec![false; w0 * h0];
    let mut count = 0;
    let mut out = Vec::new();
    let mut n = 0;
    while n < order.len() && (out.is_empty() || count < budget) {
        let j = rng.random_range(n..order.len());
        order.swap(n, j);
        let idx = order[n];
        n += 1;
        let p = (idx % w, idx / w);
        for (x, y) in receptive_field(p, level, (w0, h0)).pixels() {
            if !covered[y * w0 + x] {
                covered[y * w0 + x] = true;
                count += 1;
            }
        }
        out.push(p);
    }
    out
}

/// Coarse pixels spread over every cell of a regular grid, for evaluation.
pub fn evaluation_pixels<R: Rng>(rng: &mut R, pyramid: &FramePyramid, count: usize) -> Vec<(usize, usize)> {
    let (w, h) = pyramid.dims()[0];
    let mut all: Vec<usize> = (0..w * h).collect();
    all.shuffle(rng);
    all.truncate(count.min(w * h));
    all.sort_unstable();
    all.into_iter().map(|i| (i % w, i / w)).collect()
}

impl Scene<'_> {
    fn guard(&self) -> f64 {
        GUARD_SIGMAS * self.target.sigma_d
    }

    fn max_level_field(&self) -> MaxLevelField<'_> {
        MaxLevelField {
            field: self.field,
            max_level: self.max_level.unwrap_or(self.field.config().grid.levels),
        }
    }

    /// Renders one pixel of a frame at `pose`.
    pub fn render_pixel(&self, pose: &Pose, x: usize, y: usize, range: Option<f64>) -> Result<RayRender> {
        let ray = pixel_to_ray(x as f64, y as f64, self.intrinsics, pose);
        let view = self.max_level_field();
        let mut scratch = self.field.scratch();
        render_ray(
            &view,
            &mut scratch,
            &ray,
            self.render,
            self.bounds,
            self.occupancy,
            range.map(|r| SampleWindow::around(r, self.guard())),
        )
    }

    /// Evaluates the batch loss at `level` and, optionally, its gradients.
    pub fn evaluate(&self, level: usize, frames: &[FrameBatch<'_>], want: GradRequest) -> Result<BatchResult> {
        let k = self.intrinsics;
        let mut jobs: Vec<RayJob> = Vec::new();
        // per frame, per coarse pixel: slots of its receptive field in row-major order
        let mut patches: Vec<Vec<Vec<usize>>> = Vec::with_capacity(frames.len());
        for (fi, fb) in frames.iter().enumerate() {
            let dims = fb.pyramid.dims();
            if level > fb.pyramid.levels() {
                return Err(Error::Contract(format!(
                    "level {level} requested from a {}-level pyramid",
                    fb.pyramid.levels()
                )));
            }
            let (w0, h0) = dims[0];
            if (w0, h0) != (k.width, k.height) {
                return Err(Error::Contract("frame size does not match the intrinsics".into()));
            }
            let mut slot_of = vec![usize::MAX; w0 * h0];
            let mut frame_patches = Vec::with_capacity(fb.coarse.len());
            for &p in &fb.coarse {
                let rect = receptive_field(p, level, (w0, h0));
                let mut slots = Vec::with_capacity(rect.area());
                for (x, y) in rect.pixels() {
                    let i = y * w0 + x;
                    if slot_of[i] == usize::MAX {
                        slot_of[i] = jobs.len();
                        let cos = k.z_over_range(x as f64, y as f64);
                        jobs.push(RayJob {
                            frame: fi,
                            ray: pixel_to_ray(x as f64, y as f64, k, &fb.pose),
                            cos,
                            range: fb.pyramid.depth_at(0, x, y).map(|z| z / cos),
                        });
                    }
                    slots.push(slot_of[i]);
                }
                frame_patches.push(slots);
            }
            patches.push(frame_patches);
        }

        let chunk_len = jobs.len().div_ceil(self.chunks.max(1)).max(1);
        let view = self.max_level_field();
        let guard = self.guard();
        let renders: Vec<RayRender> = jobs
            .par_chunks(chunk_len)
            .map(|chunk| -> Result<Vec<RayRender>> {
                let mut scratch = self.field.scratch();
                chunk
                    .iter()
                    .map(|j| {
                        render_ray(
                            &view,
                            &mut scratch,
                            &j.ray,
                            self.render,
                            self.bounds,
                            self.occupancy,
                            j.range.map(|r| SampleWindow::around(r, guard)),
                        )
                    })
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();

        // losses and per-ray upstream gradients
        let n_coarse: usize = frames.iter().map(|f| f.coarse.len()).sum();
        let n_depth: usize = frames
            .iter()
            .map(|f| f.coarse.iter().filter(|p| f.pyramid.depth_at(level, p.0, p.1).is_some()).count())
            .sum();
        let n_kl = if self.kl == KlTarget::None {
            0
        } else {
            jobs.iter().filter(|j| j.range.is_some()).count()
        };
        let mut up: Vec<RayUpstream> = vec![RayUpstream::default(); jobs.len()];
        let mut parts = LossParts::default();
        let weights = PixelLossWeights {
            rgb: if n_coarse > 0 { 1.0 / (3 * n_coarse) as f64 } else { 0.0 },
            depth: if n_depth > 0 { 1.0 / n_depth as f64 } else { 0.0 },
        };
        let lambda_d = self.loss.lambda_d;
        for (fi, fb) in frames.iter().enumerate() {
            for (p, slots) in fb.coarse.iter().zip(&patches[fi]) {
                let rgb: Vec<[f64; 3]> = slots.iter().map(|s| renders[*s].color()).collect();
                let z: Vec<f64> = slots.iter().map(|s| renders[*s].depth() * jobs[*s].cos).collect();
                let cl = coarse_pixel_loss(&rgb, &z, fb.pyramid, *p, level, &weights)?;
                parts.rgb += cl.rgb;
                parts.depth += cl.depth;
                for (i, s) in slots.iter().enumerate() {
                    let u = &mut up[*s];
                    for c in 0..3 {
                        u.color[c] += cl.d_rgb[i][c];
                    }
                    u.depth += lambda_d * cl.d_depth[i] * jobs[*s].cos;
                }
            }
        }
        if n_kl > 0 {
            let scale = self.loss.lambda_kl / n_kl as f64;
            let step = self.render.metric_step(self.bounds);
            for (j, (job, r)) in jobs.iter().zip(&renders).enumerate() {
                let Some(range) = job.range else { continue };
                let q = ray_targets(self.kl, self.target, &r.depths, step, range)?;
                let (l, g) = kl_ray(r.weights(), &q)?;
                parts.kl += l / n_kl as f64;
                up[j].weights = Some(g.into_iter().map(|v| v * scale).collect());
            }
        }
        parts.total = parts.rgb + lambda_d * parts.depth + self.loss.lambda_kl * parts.kl;

        let mut result = BatchResult {
            loss: parts,
            field_grad: None,
            pose_grads: vec![[0.0; 6]; frames.len()],
            rays: jobs.len(),
            coarse_pixels: n_coarse,
            depth_pixels: n_depth,
            kl_rays: n_kl,
        };
        if !(want.field || want.poses) {
            return Ok(result);
        }

        let n_params = self.field.num_params();
        let max_level = self.max_level;
        let partials: Vec<(Option<Vec<f64>>, Vec<[f64; 6]>)> = (0..jobs.len().div_ceil(chunk_len))
            .into_par_iter()
            .map(|c| -> Result<_> {
                let range = c * chunk_len..((c + 1) * chunk_len).min(jobs.len());
                let mut scratch = self.field.scratch();
                let mut grads = want.field.then(|| vec![0.0; n_params]);
                let mut poses = vec![[0.0; 6]; frames.len()];
                for j in range {
                    let job = &jobs[j];
                    backward_ray(
                        self.field,
                        max_level,
                        &mut scratch,
                        &job.ray,
                        self.bounds,
                        &renders[j],
                        &up[j],
                        grads.as_deref_mut(),
                        want.poses.then_some(&mut poses[job.frame]),
                    )?;
                }
                Ok((grads, poses))
            })
            .collect::<Result<_>>()?;
        let mut total = want.field.then(|| vec![0.0; n_params]);
        for (g, poses) in partials {
            if let (Some(t), Some(g)) = (total.as_mut(), g) {
                t.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            for (acc, p) in result.pose_grads.iter_mut().zip(&poses) {
                acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
        }
        result.field_grad = total;
        Ok(result)
    }
}
