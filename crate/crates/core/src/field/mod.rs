//! Scene field: hash-grid encoding followed by a geometry decoder
//! `y -> (density logit, g)` and a color decoder `g -> rgb`.
//!
//! All learnable scalars live in one flat vector so the optimizer, the
//! gradient buffers and the checkpoint format share a single layout:
//!
//! ```text
//! [ level tables | geo W1 | geo b1 | geo W2 | geo b2 | rgb W1 | rgb b1 | rgb W2 | rgb b2 ]
//! ```
//!
//! Weight matrices are row-major `[out][in]`.

mod adam;
mod checkpoint;
mod encoding;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use encoding::{HashGridConfig, HASH_PRIMES};
use encoding::{build_levels, check_domain, corner_entry, corner_weights, locate, Level};

/// Density logits are clamped to this range before `exp`.
pub const LOGIT_CLAMP: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub hidden_width: usize,
    /// Width of the geometry feature `g` passed to the color decoder.
    pub geo_feature_dim: usize,
    pub feature_init_range: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            hidden_width: 32,
            geo_feature_dim: 15,
            feature_init_range: 1e-4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.hidden_width == 0 || self.geo_feature_dim == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        if !(self.feature_init_range >= 0.0) {
            return Err(Error::Config("feature_init_range must be >= 0".into()));
        }
        Ok(())
    }
}

/// Density, color and geometry feature at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

/// Offsets of each parameter block.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub features: Range<usize>,
    pub geo_w1: Range<usize>,
    pub geo_b1: Range<usize>,
    pub geo_w2: Range<usize>,
    pub geo_b2: Range<usize>,
    pub rgb_w1: Range<usize>,
    pub rgb_b1: Range<usize>,
    pub rgb_w2: Range<usize>,
    pub rgb_b2: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    fn new(cfg: &FieldConfig, feature_len: usize) -> Self {
        let h = cfg.hidden_width;
        let g = cfg.geo_feature_dim;
        let enc = cfg.grid.encoding_width();
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let features = take(feature_len);
        let geo_w1 = take(h * enc);
        let geo_b1 = take(h);
        let geo_w2 = take((1 + g) * h);
        let geo_b2 = take(1 + g);
        let rgb_w1 = take(h * g);
        let rgb_b1 = take(h);
        let rgb_w2 = take(3 * h);
        let rgb_b2 = take(3);
        Self {
            features,
            geo_w1,
            geo_b1,
            geo_w2,
            geo_b2,
            rgb_w1,
            rgb_b1,
            rgb_w2,
            rgb_b2,
            total: at,
        }
    }

    /// The decoder blocks, i.e. everything after the feature tables.
    pub fn decoders(&self) -> Range<usize> {
        self.geo_w1.start..self.total
    }
}

/// Activations recorded by a forward pass, consumed by [`SceneField::backward`].
#[derive(Clone, Debug)]
pub struct FieldScratch {
    version: u64,
    valid: bool,
    x: [f64; 3],
    active_levels: usize,
    corner_idx: Vec<[usize; 8]>,
    corner_w: Vec<[f64; 8]>,
    frac: Vec<[f64; 3]>,
    y: Vec<f64>,
    h1: Vec<f64>,
    geo: Vec<f64>,
    h2: Vec<f64>,
    sigma: f64,
    logit_clamped: bool,
    color: [f64; 3],
}

impl FieldScratch {
    pub fn new(cfg: &FieldConfig) -> Self {
        let l = cfg.grid.levels;
        Self {
            version: u64::MAX,
            valid: false,
            x: [0.0; 3],
            active_levels: 0,
            corner_idx: vec![[0; 8]; l],
            corner_w: vec![[0.0; 8]; l],
            frac: vec![[0.0; 3]; l],
            y: vec![0.0; cfg.grid.encoding_width()],
            h1: vec![0.0; cfg.hidden_width],
            geo: vec![0.0; 1 + cfg.geo_feature_dim],
            h2: vec![0.0; cfg.hidden_width],
            sigma: 0.0,
            logit_clamped: false,
            color: [0.0; 3],
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn color(&self) -> [f64; 3] {
        self.color
    }

    pub fn position(&self) -> [f64; 3] {
        self.x
    }

    pub fn encoding(&self) -> &[f64] {
        &self.y
    }
}

/// The learnable scene representation.
#[derive(Clone, Debug)]
pub struct SceneField {
    config: FieldConfig,
    levels: Vec<Level>,
    layout: ParamLayout,
    params: Vec<f64>,
    version: u64,
}

/// Upstream gradient of a loss with respect to one field evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FieldUpstream {
    pub sigma: f64,
    pub color: [f64; 3],
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `out = W x + b` for row-major `W`.
#[inline]
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for ((o, row), bias) in out.iter_mut().zip(w.chunks_exact(n_in)).zip(b) {
        *o = bias + dot(row, x);
    }
}

/// Dot product with four independent partial sums so the loop vectorises.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Accumulates `dW += g x^T`, `db += g` and writes `dx = W^T g` when requested.
#[inline]
fn affine_backward(
    w: &[f64],
    x: &[f64],
    g: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
    dx: Option<&mut [f64]>,
) {
    let n_in = x.len();
    if let Some((dw, db)) = grads {
        for ((row, gb), &go) in dw.chunks_exact_mut(n_in).zip(db.iter_mut()).zip(g) {
            if go == 0.0 {
                continue;
            }
            *gb += go;
            for (d, &xi) in row.iter_mut().zip(x) {
                *d += go * xi;
            }
        }
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for (row, &go) in w.chunks_exact(n_in).zip(g) {
            if go == 0.0 {
                continue;
            }
            for (d, &wi) in dx.iter_mut().zip(row) {
                *d += go * wi;
            }
        }
    }
}

impl SceneField {
    /// Builds a field with the documented initialization: features uniform in
    /// `±feature_init_range`, decoder weights uniform in `±sqrt(6 / fan_in)` for
    /// hidden layers and `±sqrt(3 / fan_in)` for output layers, zero biases.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        let mut field = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = field.config.feature_init_range;
        let layout = field.layout.clone();
        let enc = field.config.grid.encoding_width();
        let h = field.config.hidden_width;
        let g = field.config.geo_feature_dim;
        let p = &mut field.params;
        if r > 0.0 {
            for v in &mut p[layout.features.clone()] {
                *v = rng.random_range(-r..r);
            }
        }
        let mut fill = |range: Range<usize>, fan_in: usize, gain: f64| {
            let bound = (gain / fan_in as f64).sqrt();
            for v in &mut p[range] {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(layout.geo_w1.clone(), enc, 6.0);
        fill(layout.geo_w2.clone(), h, 3.0);
        fill(layout.rgb_w1.clone(), g, 6.0);
        fill(layout.rgb_w2.clone(), h, 3.0);
        Ok(field)
    }

    /// All parameters zero.
    pub fn zeroed(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let levels = build_levels(&config.grid);
        let feature_len = levels
            .last()
            .map(|l| l.offset + l.entries * config.grid.features_per_level)
            .unwrap_or(0);
        let layout = ParamLayout::new(&config, feature_len);
        let params = vec![0.0; layout.total];
        Ok(Self {
            config,
            levels,
            layout,
            params,
            version: 0,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access; invalidates every recorded forward pass.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version = self.version.wrapping_add(1);
        &mut self.params
    }

    /// Monotone counter bumped on every parameter mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn scratch(&self) -> FieldScratch {
        FieldScratch::new(&self.config)
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// FNV-1a over the parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.params {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    fn active_levels(&self, max_level: Option<usize>) -> usize {
        max_level
            .map(|m| m.min(self.config.grid.levels))
            .unwrap_or(self.config.grid.levels)
    }

    /// Concatenated per-level features at `x`; levels at or above `max_level` are zero.
    pub fn encode(&self, x: &[f64; 3], max_level: Option<usize>) -> Result<Vec<f64>> {
        let mut s = self.scratch();
        self.encode_into(x, max_level, &mut s)?;
        Ok(s.y)
    }

    fn encode_into(&self, x: &[f64; 3], max_level: Option<usize>, s: &mut FieldScratch) -> Result<()> {
        check_domain(x)?;
        let f_dim = self.config.grid.features_per_level;
        let mask = (self.config.grid.table_size() - 1) as u32;
        let active = self.active_levels(max_level);
        s.x = *x;
        s.active_levels = active;
        for (l, level) in self.levels.iter().enumerate() {
            let out = &mut s.y[l * f_dim..(l + 1) * f_dim];
            if l >= active {
                out.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let (c0, f0) = locate(level, x[0]);
            let (c1, f1) = locate(level, x[1]);
            let (c2, f2) = locate(level, x[2]);
            let frac = [f0, f1, f2];
            let w = corner_weights(frac);
            let mut idx = [0usize; 8];
            for (c, slot) in idx.iter_mut().enumerate() {
                let corner = [
                    c0 + (c & 1) as u32,
                    c1 + ((c >> 1) & 1) as u32,
                    c2 + ((c >> 2) & 1) as u32,
                ];
                *slot = level.offset + corner_entry(level, mask, corner) * f_dim;
            }
            out.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..8 {
                let feat = &self.params[idx[c]..idx[c] + f_dim];
                for (o, fv) in out.iter_mut().zip(feat) {
                    *o += w[c] * fv;
                }
            }
            s.corner_idx[l] = idx;
            s.corner_w[l] = w;
            s.frac[l] = frac;
        }
        Ok(())
    }

    fn decode_geometry(&self, s: &mut FieldScratch) {
        let p = &self.params;
        let lay = &self.layout;
        affine(&p[lay.geo_w1.clone()], &p[lay.geo_b1.clone()], &s.y, &mut s.h1);
        s.h1.iter_mut().for_each(|v| *v = v.max(0.0));
        affine(&p[lay.geo_w2.clone()], &p[lay.geo_b2.clone()], &s.h1, &mut s.geo);
        let logit = s.geo[0];
        s.logit_clamped = logit.abs() > LOGIT_CLAMP;
        s.sigma = logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp();
    }

    fn decode_color(&self, s: &mut FieldScratch) {
        let p = &self.params;
        let lay = &self.layout;
        affine(&p[lay.rgb_w1.clone()], &p[lay.rgb_b1.clone()], &s.geo[1..], &mut s.h2);
        s.h2.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut z = [0.0; 3];
        affine(&p[lay.rgb_w2.clone()], &p[lay.rgb_b2.clone()], &s.h2, &mut z);
        s.color = [sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2])];
    }

    /// Full forward pass recording activations in `s`.
    pub fn forward_into(&self, x: &[f64; 3], max_level: Option<usize>, s: &mut FieldScratch) -> Result<()> {
        s.valid = false;
        self.encode_into(x, max_level, s)?;
        self.decode_geometry(s);
        self.decode_color(s);
        s.version = self.version;
        s.valid = true;
        Ok(())
    }

    pub fn forward(&self, x: &[f64; 3], max_level: Option<usize>) -> Result<FieldOutput> {
        let mut s = self.scratch();
        self.forward_into(x, max_level, &mut s)?;
        Ok(FieldOutput {
            sigma: s.sigma,
            color: s.color,
            feature: s.geo[1..].to_vec(),
        })
    }

    /// Density only (skips the color decoder).
    pub fn density_into(&self, x: &[f64; 3], s: &mut FieldScratch) -> Result<f64> {
        s.valid = false;
        self.encode_into(x, None, s)?;
        self.decode_geometry(s);
        Ok(s.sigma)
    }

    /// Reverse-mode pass for the forward recorded in `s`.
    ///
    /// Parameter gradients are accumulated into `grads` when given. Returns
    /// the gradient with respect to the (unit-cube) input position.
    ///
    /// The density activation passes gradients straight through its clamp,
    /// `d sigma / d logit = sigma`, which is exact inside the clamp range.
    pub fn backward(
        &self,
        s: &FieldScratch,
        up: &FieldUpstream,
        mut grads: Option<&mut [f64]>,
    ) -> Result<[f64; 3]> {
        if !s.valid || s.version != self.version {
            return Err(Error::Contract(
                "field backward without a matching forward pass".into(),
            ));
        }
        if let Some(g) = grads.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::Contract("gradient buffer has the wrong length".into()));
            }
        }
        let h = self.config.hidden_width;
        let gdim = self.config.geo_feature_dim;
        let lay = &self.layout;
        let p = &self.params;

        // color decoder
        let mut dz = [0.0; 3];
        for k in 0..3 {
            let c = s.color[k];
            dz[k] = up.color[k] * c * (1.0 - c);
        }
        let mut dh2 = vec![0.0; h];
        let mut dgeo = vec![0.0; 1 + gdim];
        {
            let split = grads.as_deref_mut().map(|g| {
                let (a, b) = g.split_at_mut(lay.rgb_b2.start);
                (&mut a[lay.rgb_w2.clone()], &mut b[..3])
            });
            affine_backward(&p[lay.rgb_w2.clone()], &s.h2, &dz, split, Some(&mut dh2));
        }
        for (d, &a) in dh2.iter_mut().zip(&s.h2) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        {
            let split = grads.as_deref_mut().map(|g| {
                let (a, b) = g.split_at_mut(lay.rgb_b1.start);
                (&mut a[lay.rgb_w1.clone()], &mut b[..h])
            });
            affine_backward(&p[lay.rgb_w1.clone()], &s.geo[1..], &dh2, split, Some(&mut dgeo[1..]));
        }
        dgeo[0] = up.sigma * s.sigma;

        // geometry decoder
        let mut dh1 = vec![0.0; h];
        {
            let split = grads.as_deref_mut().map(|g| {
                let (a, b) = g.split_at_mut(lay.geo_b2.start);
                (&mut a[lay.geo_w2.clone()], &mut b[..1 + gdim])
            });
            affine_backward(&p[lay.geo_w2.clone()], &s.h1, &dgeo, split, Some(&mut dh1));
        }
        for (d, &a) in dh1.iter_mut().zip(&s.h1) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        let mut dy = vec![0.0; s.y.len()];
        {
            let split = grads.as_deref_mut().map(|g| {
                let (a, b) = g.split_at_mut(lay.geo_b1.start);
                (&mut a[lay.geo_w1.clone()], &mut b[..h])
            });
            affine_backward(&p[lay.geo_w1.clone()], &s.y, &dh1, split, Some(&mut dy));
        }

        // encoding
        let f_dim = self.config.grid.features_per_level;
        let mut dx = [0.0; 3];
        for l in 0..s.active_levels {
            let dyl = &dy[l * f_dim..(l + 1) * f_dim];
            if dyl.iter().all(|v| *v == 0.0) {
                continue;
            }
            let idx = &s.corner_idx[l];
            let w = &s.corner_w[l];
            if let Some(g) = grads.as_deref_mut() {
                for c in 0..8 {
                    for (k, d) in dyl.iter().enumerate() {
                        g[idx[c] + k] += w[c] * d;
                    }
                }
            }
            let f = s.frac[l];
            let scale = self.levels[l].scale;
            for c in 0..8 {
                let a: f64 = p[idx[c]..idx[c] + f_dim]
                    .iter()
                    .zip(dyl)
                    .map(|(fv, d)| fv * d)
                    .sum();
                if a == 0.0 {
                    continue;
                }
                for k in 0..3 {
                    let mut dw = if (c >> k) & 1 == 1 { 1.0 } else { -1.0 };
                    for (j, fj) in f.iter().enumerate() {
                        if j != k {
                            dw *= if (c >> j) & 1 == 1 { *fj } else { 1.0 - *fj };
                        }
                    }
                    dx[k] += scale * a * dw;
                }
            }
        }
        Ok(dx)
    }
}

/// Anything that maps unit-cube positions to density and color.
pub trait RadianceField: Sync {
    type Scratch: Send;
    fn make_scratch(&self) -> Self::Scratch;
    fn query(&self, x: &[f64; 3], s: &mut Self::Scratch) -> Result<(f64, [f64; 3])>;
    fn density(&self, x: &[f64; 3], s: &mut Self::Scratch) -> Result<f64> {
        Ok(self.query(x, s)?.0)
    }
}

impl RadianceField for SceneField {
    type Scratch = FieldScratch;

    fn make_scratch(&self) -> FieldScratch {
        self.scratch()
    }

    fn query(&self, x: &[f64; 3], s: &mut FieldScratch) -> Result<(f64, [f64; 3])> {
        self.forward_into(x, None, s)?;
        Ok((s.sigma, s.color))
    }

    fn density(&self, x: &[f64; 3], s: &mut FieldScratch) -> Result<f64> {
        self.density_into(x, s)
    }
}

/// A field evaluated with only its first `max_level` grid levels (blurred rendering).
#[derive(Clone, Copy, Debug)]
pub struct MaxLevelField<'a> {
    pub field: &'a SceneField,
    pub max_level: usize,
}

impl RadianceField for MaxLevelField<'_> {
    type Scratch = FieldScratch;

    fn make_scratch(&self) -> FieldScratch {
        self.field.scratch()
    }

    fn query(&self, x: &[f64; 3], s: &mut FieldScratch) -> Result<(f64, [f64; 3])> {
        self.field.forward_into(x, Some(self.max_level), s)?;
        Ok((s.sigma, s.color))
    }
}
