//! Volume rendering: ray marching through the unit cube, occupancy-based
//! empty-space skipping, compositing and the reverse pass to field parameters
//! and camera pose.
//!
//! Depths handled here are metric distances along unit-length rays. The field
//! lives in the unit cube; [`SceneBounds`] maps world points into it.

mod composite;
mod march;
mod occupancy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub use composite::{composite, composite_backward, Composite, CompositeGrads};
pub use march::{backward_ray, render_ray, sample_ray, RayRender, RayUpstream, SampleWindow};
pub use occupancy::{OccupancyGrid, OccupancyUpdate};

/// Ray-march step in unit-cube units.
pub const DEFAULT_STEP: f64 = 1.732_050_807_568_877_2 / 1024.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// March step in unit-cube units.
    pub step: f64,
    pub max_samples: usize,
    /// Early termination once transmittance falls below this.
    pub transmittance_cutoff: f64,
    /// Metric ray-distance bounds.
    pub near: f64,
    pub far: f64,
    /// Occupancy grid cells per axis.
    pub occupancy_resolution: usize,
    /// Per-step opacity at which an occupancy cell counts as occupied.
    pub occupancy_alpha: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_samples: 1024,
            transmittance_cutoff: 1e-4,
            near: 0.1,
            far: 12.0,
            occupancy_resolution: 64,
            occupancy_alpha: 0.01,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config("render step must be positive".into()));
        }
        if !(self.transmittance_cutoff > 0.0 && self.transmittance_cutoff < 1.0) {
            return Err(Error::Config("transmittance_cutoff must lie in (0, 1)".into()));
        }
        if self.max_samples == 0 {
            return Err(Error::Config("max_samples must be positive".into()));
        }
        if !(self.near >= 0.0 && self.far > self.near) {
            return Err(Error::Config("render bounds need 0 <= near < far".into()));
        }
        if self.occupancy_resolution == 0 {
            return Err(Error::Config("occupancy_resolution must be positive".into()));
        }
        if !(self.occupancy_alpha > 0.0 && self.occupancy_alpha < 1.0) {
            return Err(Error::Config("occupancy_alpha must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// March step in metric units.
    pub fn metric_step(&self, bounds: &SceneBounds) -> f64 {
        self.step / bounds.scale
    }

    /// Density threshold (per metric unit) matching `occupancy_alpha` per step.
    pub fn occupancy_threshold(&self, bounds: &SceneBounds) -> f64 {
        self.occupancy_alpha / self.metric_step(bounds)
    }

    pub fn new_occupancy(&self, bounds: &SceneBounds) -> OccupancyGrid {
        OccupancyGrid::new(self.occupancy_resolution, self.occupancy_threshold(bounds))
    }
}

/// Affine map from world coordinates into the unit cube, `u = scale * x + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBounds {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl SceneBounds {
    /// Fits the box `[min, max]` into the cube, centred, with `margin` (a
    /// fraction of the largest extent) of padding on every side.
    pub fn from_box(min: [f64; 3], max: [f64; 3], margin: f64) -> Result<Self> {
        let extent = (0..3).map(|k| max[k] - min[k]).fold(0.0, f64::max);
        if !(extent > 0.0 && extent.is_finite()) || (0..3).any(|k| max[k] < min[k]) {
            return Err(Error::Config(format!("degenerate scene box {min:?}..{max:?}")));
        }
        let scale = 1.0 / (extent * (1.0 + 2.0 * margin));
        let offset = [0, 1, 2].map(|k| 0.5 - scale * 0.5 * (min[k] + max[k]));
        Ok(Self { scale, offset })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) || self.offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("scene bounds must have a positive finite scale".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn to_unit(&self, x: &Vec3) -> [f64; 3] {
        [
            self.scale * x[0] + self.offset[0],
            self.scale * x[1] + self.offset[1],
            self.scale * x[2] + self.offset[2],
        ]
    }

    #[inline]
    pub fn to_world(&self, u: &[f64; 3]) -> Vec3 {
        Vec3::new(
            (u[0] - self.offset[0]) / self.scale,
            (u[1] - self.offset[1]) / self.scale,
            (u[2] - self.offset[2]) / self.scale,
        )
    }

    /// World-space box covered by the unit cube.
    pub fn world_box(&self) -> ([f64; 3], [f64; 3]) {
        let lo = self.to_world(&[0.0; 3]);
        let hi = self.to_world(&[1.0; 3]);
        ([lo[0], lo[1], lo[2]], [hi[0], hi[1], hi[2]])
    }
}
