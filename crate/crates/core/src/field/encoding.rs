//! Multiresolution hash-grid positional encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial hash primes, one per axis.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    /// Coarsest grid, cells per unit length.
    pub min_resolution: f64,
    /// Finest grid, cells per unit length.
    pub max_resolution: f64,
    /// Entries per level table are `2^log2_table_size`.
    pub log2_table_size: u32,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            features_per_level: 2,
            min_resolution: 16.0,
            max_resolution: 256.0,
            log2_table_size: 14,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features_per_level == 0 {
            return Err(Error::Config("hash grid needs at least one level and feature".into()));
        }
        if !(self.min_resolution >= 1.0 && self.min_resolution.is_finite()) {
            return Err(Error::Config("min_resolution must be >= 1".into()));
        }
        if self.levels > 1 && self.max_resolution <= self.min_resolution {
            return Err(Error::Config(
                "max_resolution must exceed min_resolution when levels > 1".into(),
            ));
        }
        if self.log2_table_size == 0 || self.log2_table_size > 26 {
            return Err(Error::Config("log2_table_size must be in 1..=26".into()));
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }

    pub fn growth_factor(&self) -> f64 {
        if self.levels <= 1 {
            1.0
        } else {
            ((self.max_resolution.ln() - self.min_resolution.ln()) / (self.levels - 1) as f64).exp()
        }
    }

    pub fn resolution(&self, level: usize) -> f64 {
        self.min_resolution * self.growth_factor().powi(level as i32)
    }

    pub fn encoding_width(&self) -> usize {
        self.levels * self.features_per_level
    }
}

/// Per-level addressing data derived from the config.
#[derive(Clone, Debug)]
pub(crate) struct Level {
    pub scale: f64,
    /// Cells per axis; valid cell indices are `0..cells`.
    pub cells: u32,
    pub dense: bool,
    pub entries: usize,
    /// Offset of the level's first scalar in the parameter vector.
    pub offset: usize,
}

pub(crate) fn build_levels(cfg: &HashGridConfig) -> Vec<Level> {
    let t = cfg.table_size();
    let mut offset = 0;
    (0..cfg.levels)
        .map(|l| {
            let scale = cfg.resolution(l);
            let cells = (scale.ceil() as u32).max(1);
            let verts = cells as u64 + 1;
            let dense_count = verts * verts * verts;
            let dense = dense_count <= t as u64;
            let entries = if dense { dense_count as usize } else { t };
            let lvl = Level {
                scale,
                cells,
                dense,
                entries,
                offset,
            };
            offset += entries * cfg.features_per_level;
            lvl
        })
        .collect()
}

#[inline]
pub(crate) fn corner_entry(level: &Level, table_mask: u32, c: [u32; 3]) -> usize {
    if level.dense {
        let v = level.cells as usize + 1;
        c[0] as usize + v * (c[1] as usize + v * c[2] as usize)
    } else {
        let h = c[0].wrapping_mul(HASH_PRIMES[0])
            ^ c[1].wrapping_mul(HASH_PRIMES[1])
            ^ c[2].wrapping_mul(HASH_PRIMES[2]);
        (h & table_mask) as usize
    }
}

/// Cell index and fractional offset of `x` inside a level.
#[inline]
pub(crate) fn locate(level: &Level, x: f64) -> (u32, f64) {
    let p = x * level.scale;
    let mut cell = p.floor();
    let max_cell = (level.cells - 1) as f64;
    if cell > max_cell {
        cell = max_cell;
    }
    if cell < 0.0 {
        cell = 0.0;
    }
    (cell as u32, p - cell)
}

pub(crate) fn check_domain(x: &[f64; 3]) -> Result<()> {
    if x.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::Domain(format!("position {x:?} outside the unit cube")))
    }
}

/// Trilinear corner weights; corner `c` uses bit `k` of `c` for axis `k`.
#[inline]
pub(crate) fn corner_weights(f: [f64; 3]) -> [f64; 8] {
    let mut w = [0.0; 8];
    for (c, wc) in w.iter_mut().enumerate() {
        let mut acc = 1.0;
        for (k, fk) in f.iter().enumerate() {
            acc *= if (c >> k) & 1 == 1 { *fk } else { 1.0 - *fk };
        }
        *wc = acc;
    }
    w
}
