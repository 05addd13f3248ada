//! Run configuration: named presets plus field-by-field JSON overrides.
//!
//! A config file is a JSON object whose keys mirror [`RunConfig`]. Only the keys
//! that differ from the selected profile need to be present; everything else is
//! filled in from the preset before strict deserialization, so misspelled keys
//! are rejected rather than silently ignored.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{SceneBox, SceneSpec};
use crate::error::{io_err, Error, Result};
use crate::field::{FieldConfig, HashGridConfig};
use crate::mapper::MapperConfig;
use crate::objective::LossConfig;
use crate::renderer::{RenderConfig, SceneBounds};
use crate::termination::{KlTarget, TerminationConfig};
use crate::tracker::TrackerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Reduced budgets for the 160×120 synthetic desk scenes on a CPU.
    #[default]
    Desk,
    Tum,
    Scannet,
    Replica,
}

impl Profile {
    pub const ALL: [Profile; 4] = [Profile::Desk, Profile::Tum, Profile::Scannet, Profile::Replica];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Tum => "tum",
            Profile::Scannet => "scannet",
            Profile::Replica => "replica",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown profile {name:?} (expected desk, tum, scannet or replica)")))
    }

    /// Full configuration for this profile.
    pub fn preset(self) -> RunConfig {
        let mut c = RunConfig {
            profile: self,
            ..RunConfig::base()
        };
        let paper = |c: &mut RunConfig, scale: f64, sigma_d: f64, cell: f64| {
            c.termination = TerminationConfig {
                target: KlTarget::Custom,
                scale,
                sigma_d,
            };
            c.field.grid = HashGridConfig {
                levels: 16,
                features_per_level: 2,
                min_resolution: 16.0,
                max_resolution: 2048.0,
                log2_table_size: 16,
            };
            c.field_cell_size = Some(cell);
            c.tracker.lr = 1e-3;
            c.mapper.pose_lr = 5e-4;
            c.mapper.field_lr = 1e-2;
            c.mapper.window = 5;
        };
        let loss = |kl: f64| LossConfig {
            lambda_d: 1.0,
            lambda_kl: kl,
        };
        match self {
            Profile::Desk => {}
            Profile::Tum => {
                paper(&mut c, 10_000.0, 0.02, 0.02);
                c.tracker.iterations = 15;
                c.tracker.gpl = 2;
                c.tracker.rays = 2048;
                c.tracker.loss = loss(10.0);
                c.mapper.local_iterations = 15;
                c.mapper.global_iterations = 15;
                c.mapper.gpl = 2;
                c.mapper.rays = 2048;
                c.mapper.loss = loss(10.0);
            }
            Profile::Scannet => {
                paper(&mut c, 5_000.0, 0.04, 0.04);
                c.tracker.iterations = 15;
                c.tracker.gpl = 2;
                c.tracker.rays = 2048;
                c.tracker.loss = loss(1.0);
                c.mapper.local_iterations = 15;
                c.mapper.global_iterations = 15;
                c.mapper.gpl = 2;
                c.mapper.rays = 4096;
                c.mapper.loss = loss(1.0);
            }
            Profile::Replica => {
                paper(&mut c, 10_000.0, 0.01, 0.01);
                c.tracker.iterations = 10;
                c.tracker.gpl = 1;
                c.tracker.rays = 4096;
                c.tracker.loss = loss(1.0);
                c.mapper.local_iterations = 0;
                c.mapper.global_iterations = 20;
                c.mapper.gpl = 1;
                c.mapper.rays = 4096;
                c.mapper.loss = loss(1.0);
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// A TUM-layout directory (also what `synth` writes).
    Tum { path: PathBuf },
    /// A scene generated in memory.
    Synthetic { spec: SceneSpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Depth L1 is measured on every `depth_every`-th frame.
    pub depth_every: usize,
    /// Pixels per evaluated frame; `None` uses every valid pixel.
    pub depth_samples: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            depth_every: 10,
            depth_samples: Some(4096),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub dataset: DatasetConfig,
    /// Use only the first this many frames.
    pub max_frames: Option<usize>,
    /// Metric box mapped into the unit cube. Taken from the dataset when absent.
    pub scene_box: Option<SceneBox>,
    /// Padding around the scene box, as a fraction of its largest extent.
    pub bounds_margin: f64,
    pub field: FieldConfig,
    /// When set, the finest hash-grid resolution becomes the next power of two
    /// whose cell is at most this many metres.
    pub field_cell_size: Option<f64>,
    pub render: RenderConfig,
    pub termination: TerminationConfig,
    pub tracker: TrackerConfig,
    pub mapper: MapperConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// Rayon worker threads; 0 keeps the default pool.
    pub workers: usize,
    /// Fixed number of gradient partial sums. Results depend on this value but
    /// not on the worker count.
    pub chunks: usize,
    /// When false, `chunks` follows the worker count (faster, not reproducible
    /// across machines).
    pub deterministic: bool,
    /// Initialise frame 0 at its ground-truth pose when one exists.
    pub gt_first_pose: bool,
    /// Write a checkpoint every this many frames; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Profile::Desk.preset()
    }
}

impl RunConfig {
    /// The desk preset, from which the others derive.
    fn base() -> Self {
        let mut spec = SceneSpec::default();
        spec.trajectory.frames = 100;
        Self {
            profile: Profile::Desk,
            dataset: DatasetConfig::Synthetic { spec },
            max_frames: None,
            scene_box: None,
            bounds_margin: 0.05,
            field: FieldConfig {
                grid: HashGridConfig {
                    levels: 12,
                    features_per_level: 2,
                    min_resolution: 16.0,
                    max_resolution: 256.0,
                    log2_table_size: 14,
                },
                ..FieldConfig::default()
            },
            field_cell_size: None,
            render: RenderConfig::default(),
            termination: TerminationConfig::default(),
            tracker: TrackerConfig {
                rays: 512,
                iterations: 10,
                gpl: 1,
                lr: 3e-3,
                loss: LossConfig::default(),
                eval_pixels: 512,
            },
            mapper: MapperConfig {
                rays: 1024,
                local_iterations: 10,
                global_iterations: 10,
                gpl: 1,
                init_iterations: 100,
                ..MapperConfig::default()
            },
            eval: EvalConfig::default(),
            seed: 0,
            output: None,
            workers: 0,
            chunks: 16,
            deterministic: true,
            gt_first_pose: true,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.render.validate()?;
        self.termination.validate()?;
        self.tracker.validate()?;
        self.mapper.validate()?;
        if !(self.bounds_margin >= 0.0 && self.bounds_margin.is_finite()) {
            return Err(Error::Config("bounds_margin must be >= 0".into()));
        }
        if let Some(c) = self.field_cell_size {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("field_cell_size must be positive".into()));
            }
        }
        if self.chunks == 0 {
            return Err(Error::Config("chunks must be positive".into()));
        }
        if self.eval.depth_every == 0 || self.eval.depth_samples == Some(0) {
            return Err(Error::Config("eval depth_every and depth_samples must be positive".into()));
        }
        if self.max_frames == Some(0) {
            return Err(Error::Config("max_frames must be positive".into()));
        }
        if let Some(b) = &self.scene_box {
            b.bounds(self.bounds_margin)?;
        }
        Ok(())
    }

    /// Builds a config from a JSON overlay on top of a profile preset.
    ///
    /// The profile is `profile` if given, else the overlay's `"profile"` key,
    /// else desk.
    pub fn from_overlay(overlay: &Value, profile: Option<Profile>) -> Result<Self> {
        let obj = overlay
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let profile = match (profile, obj.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => Profile::parse(v.as_str().ok_or_else(|| Error::Config("profile must be a string".into()))?)?,
            (None, None) => Profile::Desk,
        };
        let mut overlay = overlay.clone();
        overlay["profile"] = serde_json::to_value(profile)?;
        let cfg = apply_overlay(&profile.preset(), &overlay)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let overlay: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_overlay(&overlay, profile)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    /// Scene bounds and the field config with any cell-size override applied.
    pub fn resolve_field(&self) -> Result<(SceneBounds, FieldConfig)> {
        let b = self
            .scene_box
            .as_ref()
            .ok_or_else(|| Error::Config("scene_box is not set and the dataset does not provide one".into()))?;
        let bounds = b.bounds(self.bounds_margin)?;
        let mut field = self.field.clone();
        if let Some(cell) = self.field_cell_size {
            field.grid.max_resolution = max_resolution_for_cell(cell, bounds.scale).max(field.grid.min_resolution);
        }
        field.validate()?;
        Ok((bounds, field))
    }
}

/// Smallest power of two `R` whose unit-cube cell `1/R` spans at most `cell`
/// metres when the world is scaled by `scale`.
pub fn max_resolution_for_cell(cell: f64, scale: f64) -> f64 {
    let r = 1.0 / (cell * scale);
    2f64.powf(r.log2().ceil())
}

/// `base` with the keys of `patch` overlaid, deserialized strictly.
pub fn apply_overlay<T: Serialize + DeserializeOwned>(base: &T, patch: &Value) -> Result<T> {
    let mut merged = serde_json::to_value(base)?;
    merge(&mut merged, patch);
    serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))
}

/// Recursively overlays `patch` onto `base`. Objects merge key by key, except
/// that a tagged object whose `"type"` changes is replaced wholesale.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let retyped = matches!((b.get("type"), p.get("type")), (Some(x), Some(y)) if x != y);
            if retyped {
                *b = p.clone();
                return;
            }
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}
