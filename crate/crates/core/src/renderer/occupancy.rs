//! Coarse occupancy grid over the unit cube used to skip empty space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::RadianceField;

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    resolution: usize,
    /// Running density estimate per cell; `INFINITY` until the first update.
    density: Vec<f64>,
    bits: Vec<u64>,
    threshold: f64,
    updates: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccupancyUpdate {
    /// Jittered probes per cell.
    pub probes: usize,
    pub decay: f64,
    pub seed: u64,
}

impl Default for OccupancyUpdate {
    fn default() -> Self {
        Self {
            probes: 2,
            decay: 0.95,
            seed: 0,
        }
    }
}

impl OccupancyGrid {
    /// Fully occupied grid with `resolution^3` cells; `threshold` is the density
    /// at or above which a cell counts as occupied.
    pub fn new(resolution: usize, threshold: f64) -> Self {
        let n = resolution.pow(3);
        let mut bits = vec![u64::MAX; n.div_ceil(64)];
        if !n.is_multiple_of(64) {
            *bits.last_mut().unwrap() = (1u64 << (n % 64)) - 1;
        }
        Self {
            resolution,
            density: vec![f64::INFINITY; n],
            bits,
            threshold,
            updates: 0,
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn cell_count(&self) -> usize {
        self.density.len()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    #[inline]
    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution * (j + self.resolution * k)
    }

    #[inline]
    pub fn is_cell_occupied(&self, idx: usize) -> bool {
        (self.bits[idx / 64] >> (idx % 64)) & 1 == 1
    }

    /// Occupancy at a unit-cube position (clamped into the cube).
    #[inline]
    pub fn is_occupied(&self, x: &[f64; 3]) -> bool {
        let r = self.resolution;
        let c = |v: f64| ((v * r as f64) as isize).clamp(0, r as isize - 1) as usize;
        self.is_cell_occupied(self.cell_index(c(x[0]), c(x[1]), c(x[2])))
    }

    pub fn cell_density(&self, idx: usize) -> f64 {
        self.density[idx]
    }

    /// One update pass: each cell takes the max density over jittered probes,
    /// blended as `max(decay * old, new)`, then re-thresholded.
    pub fn update<F: RadianceField>(&self, field: &F, cfg: &OccupancyUpdate) -> Result<OccupancyGrid> {
        let r = self.resolution;
        let slab = r * r;
        let seed = cfg.seed ^ self.updates.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let new_density: Vec<Vec<f64>> = (0..r)
            .into_par_iter()
            .map(|k| -> Result<Vec<f64>> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
                let mut scratch = field.make_scratch();
                let mut out = Vec::with_capacity(slab);
                for j in 0..r {
                    for i in 0..r {
                        let idx = self.cell_index(i, j, k);
                        let mut best = 0.0f64;
                        for _ in 0..cfg.probes.max(1) {
                            let x = [
                                (i as f64 + rng.random::<f64>()) / r as f64,
                                (j as f64 + rng.random::<f64>()) / r as f64,
                                (k as f64 + rng.random::<f64>()) / r as f64,
                            ];
                            best = best.max(field.density(&x, &mut scratch)?);
                        }
                        let old = self.density[idx];
                        out.push(if old.is_finite() {
                            (cfg.decay * old).max(best)
                        } else {
                            best
                        });
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let density: Vec<f64> = new_density.into_iter().flatten().collect();
        let mut bits = vec![0u64; density.len().div_ceil(64)];
        for (idx, d) in density.iter().enumerate() {
            if *d >= self.threshold {
                bits[idx / 64] |= 1 << (idx % 64);
            }
        }
        Ok(OccupancyGrid {
            resolution: r,
            density,
            bits,
            threshold: self.threshold,
            updates: self.updates + 1,
        })
    }
}
