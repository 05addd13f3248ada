//! RGB-D sequences: TUM-layout ingestion and a synthetic scene generator.

mod synthetic;
mod tum;


pub use synthetic::{
    cast, generate_synthetic, Hit, Material, Pattern, Primitive, RoomSpec, SceneSpec, TrajectorySpec,
    NoiseSpec,
};
pub use tum::{
    associate, load_tum, nearest_within, parse_list, read_trajectory, write_trajectory, write_tum,
    TrajectoryEntry, ASSOCIATION_MAX_DT,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::raster::Image;
use crate::renderer::SceneBounds;

/// Metres per 16-bit depth unit is `1 / DEPTH_SCALE`.
pub const DEPTH_SCALE: f64 = 5000.0;

/// Name of the side file carrying intrinsics and the scene box.
pub const DATASET_INFO_FILE: &str = "dataset.json";

/// One RGB-D observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// Seconds.
    pub timestamp: f64,
    /// Three channels in `[0, 1]`.
    pub rgb: Image,
    /// z-depth in metres, `0` marks a missing measurement.
    pub depth: Image,
    pub gt_pose: Option<Pose>,
}

impl Frame {
    pub fn valid_depth_fraction(&self) -> f64 {
        let n = self.depth.len();
        if n == 0 {
            return 0.0;
        }
        self.depth.data().iter().filter(|&&d| d > 0.0).count() as f64 / n as f64
    }

    fn check(&self, k: &Intrinsics) -> Result<()> {
        let dims = (k.width, k.height);
        if self.rgb.dims() != dims || self.rgb.channels() != 3 {
            return Err(Error::Dataset(format!(
                "frame {}: rgb is {:?}x{}, intrinsics expect {:?}x3",
                self.index,
                self.rgb.dims(),
                self.rgb.channels(),
                dims
            )));
        }
        if self.depth.dims() != dims || self.depth.channels() != 1 {
            return Err(Error::Dataset(format!(
                "frame {}: depth is {:?}x{}, intrinsics expect {:?}x1",
                self.index,
                self.depth.dims(),
                self.depth.channels(),
                dims
            )));
        }
        if self.depth.data().iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::Dataset(format!("frame {}: negative or non-finite depth", self.index)));
        }
        Ok(())
    }
}

/// Axis-aligned box enclosing the scene, metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBox {
    pub fn diameter(&self) -> f64 {
        (0..3)
            .map(|i| (self.max[i] - self.min[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn bounds(&self, margin: f64) -> Result<SceneBounds> {
        SceneBounds::from_box(self.min, self.max, margin)
    }
}

/// Contents of the `dataset.json` side file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub intrinsics: Intrinsics,
    #[serde(default)]
    pub scene_box: Option<SceneBox>,
}

/// A loaded or generated sequence.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub scene_box: Option<SceneBox>,
    /// Frames discarded during association.
    pub dropped: usize,
}

impl Sequence {
    pub fn new(intrinsics: Intrinsics, frames: Vec<Frame>, scene_box: Option<SceneBox>) -> Result<Self> {
        intrinsics.validate()?;
        for f in &frames {
            f.check(&intrinsics)?;
        }
        Ok(Self {
            intrinsics,
            frames,
            scene_box,
            dropped: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Keeps the first `n` frames.
    pub fn truncate(&mut self, n: usize) {
        self.frames.truncate(n);
    }

    pub fn gt_poses(&self) -> Option<Vec<Pose>> {
        self.frames.iter().map(|f| f.gt_pose).collect()
    }

    /// Mean of all valid depth values, metres.
    pub fn mean_depth(&self) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for f in &self.frames {
            for &d in f.depth.data() {
                if d > 0.0 {
                    sum += d;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// 8-bit quantization of a colour value, as stored in PNG.
#[inline]
pub fn quantize_rgb(v: f64) -> f64 {
    rgb_to_u8(v) as f64 / 255.0
}

#[inline]
pub(crate) fn rgb_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 16-bit quantization of a metric depth; values beyond the 16-bit range become invalid.
#[inline]
pub fn quantize_depth(d: f64) -> f64 {
    depth_to_u16(d) as f64 / DEPTH_SCALE
}

#[inline]
pub(crate) fn depth_to_u16(d: f64) -> u16 {
    if !(d.is_finite() && d > 0.0) {
        return 0;
    }
    let q = (d * DEPTH_SCALE).round();
    if q > u16::MAX as f64 {
        0
    } else {
        q as u16
    }
}
