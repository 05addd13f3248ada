//! Per-ray sampling, forward rendering and the reverse pass.

use crate::error::Result;
use crate::field::{FieldScratch, FieldUpstream, RadianceField, SceneField};
use crate::geometry::Ray;

use super::composite::{composite, composite_backward, Composite};
use super::occupancy::OccupancyGrid;
use super::{RenderConfig, SceneBounds};

/// Ray-distance interval in which samples are never skipped, neither by the
/// occupancy grid nor by early termination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleWindow {
    pub lo: f64,
    pub hi: f64,
}

impl SampleWindow {
    pub fn around(center: f64, half_width: f64) -> Self {
        Self {
            lo: center - half_width,
            hi: center + half_width,
        }
    }

    #[inline]
    pub fn contains(&self, s: f64) -> bool {
        s >= self.lo && s <= self.hi
    }
}

/// Metric interval `[s0, s1]` where the ray is inside the unit cube and the
/// near/far range, if any.
fn cube_interval(ray: &Ray, cfg: &RenderConfig, bounds: &SceneBounds) -> Option<(f64, f64)> {
    let o = bounds.to_unit(&ray.origin);
    let mut s0 = cfg.near;
    let mut s1 = cfg.far;
    for k in 0..3 {
        let d = bounds.scale * ray.direction[k];
        if d == 0.0 {
            if !(0.0..=1.0).contains(&o[k]) {
                return None;
            }
            continue;
        }
        let a = (0.0 - o[k]) / d;
        let b = (1.0 - o[k]) / d;
        s0 = s0.max(a.min(b));
        s1 = s1.min(a.max(b));
    }
    (s0 <= s1).then_some((s0, s1))
}

/// Sample depths along `ray`: multiples of the metric step that fall inside
/// the unit cube, skipping unoccupied cells outside `window`, capped at
/// `max_samples`.
///
/// Depths sit on a fixed lattice measured from the ray origin, so they do not
/// move when the ray rotates.
pub fn sample_ray(
    ray: &Ray,
    cfg: &RenderConfig,
    bounds: &SceneBounds,
    occ: Option<&OccupancyGrid>,
    window: Option<SampleWindow>,
) -> Vec<f64> {
    let Some((s0, s1)) = cube_interval(ray, cfg, bounds) else {
        return Vec::new();
    };
    let h = cfg.metric_step(bounds);
    let k0 = (s0 / h).ceil() as i64;
    let k1 = (s1 / h).floor() as i64;
    let mut out = Vec::new();
    for k in k0..=k1 {
        if out.len() >= cfg.max_samples {
            break;
        }
        let s = k as f64 * h;
        let keep = match occ {
            None => true,
            Some(g) => {
                window.is_some_and(|w| w.contains(s)) || g.is_occupied(&unit_position(ray, bounds, s))
            }
        };
        if keep {
            out.push(s);
        }
    }
    out
}

#[inline]
fn unit_position(ray: &Ray, bounds: &SceneBounds, s: f64) -> [f64; 3] {
    bounds.to_unit(&ray.at(s)).map(|v| v.clamp(0.0, 1.0))
}

/// Everything recorded while rendering one ray.
#[derive(Clone, Debug, Default)]
pub struct RayRender {
    pub depths: Vec<f64>,
    /// Unit-cube sample positions.
    pub positions: Vec<[f64; 3]>,
    pub sigmas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub comp: Composite,
}

impl RayRender {
    pub fn color(&self) -> [f64; 3] {
        self.comp.color
    }

    /// Expected ray distance (not normalized by the weight sum).
    pub fn depth(&self) -> f64 {
        self.comp.depth
    }

    pub fn weights(&self) -> &[f64] {
        &self.comp.weights
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// Renders one ray. Marching stops once transmittance drops below the cutoff,
/// except that samples inside `window` are still evaluated.
pub fn render_ray<F: RadianceField>(
    field: &F,
    scratch: &mut F::Scratch,
    ray: &Ray,
    cfg: &RenderConfig,
    bounds: &SceneBounds,
    occ: Option<&OccupancyGrid>,
    window: Option<SampleWindow>,
) -> Result<RayRender> {
    let candidates = sample_ray(ray, cfg, bounds, occ, window);
    let h = cfg.metric_step(bounds);
    let mut out = RayRender {
        depths: Vec::with_capacity(candidates.len()),
        positions: Vec::with_capacity(candidates.len()),
        sigmas: Vec::with_capacity(candidates.len()),
        colors: Vec::with_capacity(candidates.len()),
        comp: Composite::default(),
    };
    let mut t = 1.0;
    for s in candidates {
        if t < cfg.transmittance_cutoff && !window.is_some_and(|w| w.contains(s)) {
            if window.is_some_and(|w| s < w.lo) {
                continue;
            }
            break;
        }
        let x = unit_position(ray, bounds, s);
        let (sigma, color) = field.query(&x, scratch)?;
        t *= (-sigma * h).exp();
        out.depths.push(s);
        out.positions.push(x);
        out.sigmas.push(sigma);
        out.colors.push(color);
    }
    out.comp = composite(&out.sigmas, &out.colors, &out.depths, h);
    Ok(out)
}

/// Upstream gradient on one rendered ray.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayUpstream {
    pub color: [f64; 3],
    /// On the expected ray distance.
    pub depth: f64,
    /// Direct gradient on each compositing weight.
    pub weights: Option<Vec<f64>>,
}

/// Reverse pass of [`render_ray`] for a [`SceneField`] evaluated with the
/// given `max_level`.
///
/// Field parameter gradients are accumulated into `grads`. The pose gradient
/// for a left-multiplied twist `[omega, v]` at the current pose is accumulated
/// into `pose_grad`: each sample at world position `X` with world-space
/// gradient `g` adds `X × g` to `omega` and `g` to `v`.
#[allow(clippy::too_many_arguments)]
pub fn backward_ray(
    field: &SceneField,
    max_level: Option<usize>,
    scratch: &mut FieldScratch,
    ray: &Ray,
    bounds: &SceneBounds,
    render: &RayRender,
    up: &RayUpstream,
    mut grads: Option<&mut [f64]>,
    mut pose_grad: Option<&mut [f64; 6]>,
) -> Result<()> {
    if render.is_empty() {
        return Ok(());
    }
    let cg = composite_backward(
        &render.comp,
        &render.colors,
        &render.depths,
        up.color,
        up.depth,
        up.weights.as_deref(),
    )?;
    for i in 0..render.len() {
        let upstream = FieldUpstream {
            sigma: cg.sigma[i],
            color: cg.color[i],
        };
        if upstream.sigma == 0.0 && upstream.color == [0.0; 3] {
            continue;
        }
        field.forward_into(&render.positions[i], max_level, scratch)?;
        let dx = field.backward(scratch, &upstream, grads.as_deref_mut())?;
        if let Some(pg) = pose_grad.as_deref_mut() {
            let g = dx.map(|v| v * bounds.scale);
            let x = ray.at(render.depths[i]);
            pg[0] += x[1] * g[2] - x[2] * g[1];
            pg[1] += x[2] * g[0] - x[0] * g[2];
            pg[2] += x[0] * g[1] - x[1] * g[0];
            pg[3] += g[0];
            pg[4] += g[1];
            pg[5] += g[2];
        }
    }
    Ok(())
}
