//! Gaussian image pyramids and the coarse-pixel losses built on them.
//!
//! Color levels use the 5×5 binomial kernel `[1,4,6,4,1]⊗[1,4,6,4,1]/256`
//! with clamp-to-edge borders, keeping every second pixel from index 0.
//! Depth levels take the lower median of the valid in-bounds samples of the
//! same 5×5 window.
//!
//! A coarse pixel at level `l` depends on a `s(l) × s(l)` block of full
//! resolution pixels, `s(l) = 4(2^l − 1) + 1`. The patch functions recompute
//! such a pixel from a rendered level-0 block through exactly the same
//! arithmetic as the full-image reduce, and push gradients back through it.

use crate::error::{Error, Result};
use crate::raster::Image;

/// One-dimensional binomial taps; the 2-D kernel is their outer product / 256.
pub const TAPS: [u32; 5] = [1, 4, 6, 4, 1];

/// Deepest supported pyramid level.
pub const MAX_LEVEL: usize = 3;

/// Image sizes of levels `0..=levels`, halving with round-up.
pub fn level_dims(width: usize, height: usize, levels: usize) -> Vec<(usize, usize)> {
    let mut dims = vec![(width, height)];
    for _ in 0..levels {
        let (w, h) = *dims.last().unwrap();
        dims.push((w.div_ceil(2), h.div_ceil(2)));
    }
    dims
}

#[inline]
fn clamp_index(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Smoothed value of output pixel `(x, y)` from a `w × h` input read through `get`.
#[inline]
fn reduce_at(get: impl Fn(usize, usize) -> f64, w: usize, h: usize, x: usize, y: usize) -> f64 {
    let mut acc = 0.0;
    for (ky, wy) in TAPS.iter().enumerate() {
        let sy = clamp_index(2 * y as isize + ky as isize - 2, h);
        for (kx, wx) in TAPS.iter().enumerate() {
            let sx = clamp_index(2 * x as isize + kx as isize - 2, w);
            acc += (wy * wx) as f64 * get(sx, sy);
        }
    }
    acc / 256.0
}

/// Lower median over the valid in-bounds samples of the window at `(x, y)`.
/// Each sample carries a tag (its source pixel) that travels with the value.
#[inline]
fn median_at(
    get: impl Fn(usize, usize) -> Option<(f64, usize)>,
    w: usize,
    h: usize,
    x: usize,
    y: usize,
) -> Option<(f64, usize)> {
    let mut window: Vec<(f64, usize)> = Vec::with_capacity(25);
    for dy in -2isize..=2 {
        let sy = 2 * y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for dx in -2isize..=2 {
            let sx = 2 * x as isize + dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            if let Some(v) = get(sx as usize, sy as usize) {
                window.push(v);
            }
        }
    }
    if window.is_empty() {
        return None;
    }
    window.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Some(window[(window.len() - 1) / 2])
}

fn check_reducible(w: usize, h: usize) -> Result<()> {
    if w < 2 || h < 2 {
        return Err(Error::Domain(format!("cannot reduce a {w}x{h} image")));
    }
    Ok(())
}

/// One Gaussian reduce step (any channel count).
pub fn reduce_rgb(img: &Image) -> Result<Image> {
    let (w, h) = img.dims();
    check_reducible(w, h)?;
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = Image::new(ow, oh, img.channels());
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..img.channels() {
                out.set(x, y, c, reduce_at(|sx, sy| img.get(sx, sy, c), w, h, x, y));
            }
        }
    }
    Ok(out)
}

/// One median reduce step for a depth map with validity mask.
pub fn reduce_depth(depth: &Image, valid: &[bool]) -> Result<(Image, Vec<bool>)> {
    let (w, h) = depth.dims();
    check_reducible(w, h)?;
    if valid.len() != w * h || depth.channels() != 1 {
        return Err(Error::Contract("depth reduce needs a one-channel map and a matching mask".into()));
    }
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = Image::new(ow, oh, 1);
    let mut out_valid = vec![false; ow * oh];
    let get = |sx: usize, sy: usize| valid[sy * w + sx].then(|| (depth.get(sx, sy, 0), sy * w + sx));
    for y in 0..oh {
        for x in 0..ow {
            if let Some((v, _)) = median_at(get, w, h, x, y) {
                out.set(x, y, 0, v);
                out_valid[y * ow + x] = true;
            }
        }
    }
    Ok((out, out_valid))
}

/// Ground-truth color and depth pyramids of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePyramid {
    pub rgb: Vec<Image>,
    pub depth: Vec<Image>,
    pub valid: Vec<Vec<bool>>,
}

impl FramePyramid {
    /// Builds levels `0..=levels`; depth values `<= 0` or non-finite are invalid.
    pub fn build(rgb: &Image, depth: &Image, levels: usize) -> Result<Self> {
        if rgb.dims() != depth.dims() {
            return Err(Error::Contract("color and depth sizes differ".into()));
        }
        if levels > MAX_LEVEL {
            return Err(Error::Config(format!("pyramid level {levels} exceeds {MAX_LEVEL}")));
        }
        let mut out = Self {
            rgb: vec![rgb.clone()],
            depth: vec![depth.clone()],
            valid: vec![depth.data().iter().map(|d| *d > 0.0 && d.is_finite()).collect()],
        };
        for l in 0..levels {
            let next_rgb = reduce_rgb(&out.rgb[l])?;
            let (next_depth, next_valid) = reduce_depth(&out.depth[l], &out.valid[l])?;
            out.rgb.push(next_rgb);
            out.depth.push(next_depth);
            out.valid.push(next_valid);
        }
        Ok(out)
    }

    pub fn levels(&self) -> usize {
        self.rgb.len() - 1
    }

    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.rgb.iter().map(|i| i.dims()).collect()
    }

    /// Ground-truth depth at a level pixel, if valid.
    pub fn depth_at(&self, level: usize, x: usize, y: usize) -> Option<f64> {
        let w = self.depth[level].width();
        self.valid[level][y * w + x].then(|| self.depth[level].get(x, y, 0))
    }
}

/// Axis-aligned pixel block `[x0, x0 + w) × [y0, y0 + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    /// Row-major index of an absolute pixel inside the block.
    #[inline]
    pub fn local(&self, x: usize, y: usize) -> usize {
        (y - self.y0) * self.w + (x - self.x0)
    }

    /// Absolute pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y0 + self.h).flat_map(move |y| (self.x0..self.x0 + self.w).map(move |x| (x, y)))
    }
}

/// `s(l) = 4(2^l − 1) + 1`.
pub fn receptive_side(level: usize) -> usize {
    4 * ((1 << level) - 1) + 1
}

/// Block at level `k ≤ l` that a level-`l` pixel depends on, clipped to `dims_k`.
pub fn level_rect(p: (usize, usize), l: usize, k: usize, dims_k: (usize, usize)) -> Rect {
    let f = 1isize << (l - k);
    let r = 2 * (f - 1);
    let span = |c: usize, n: usize| {
        let lo = (c as isize * f - r).max(0) as usize;
        let hi = ((c as isize * f + r) as usize).min(n - 1);
        (lo, hi - lo + 1)
    };
    let (x0, w) = span(p.0, dims_k.0);
    let (y0, h) = span(p.1, dims_k.1);
    Rect { x0, y0, w, h }
}

/// Level-0 receptive field of pixel `p` at level `l`.
pub fn receptive_field(p: (usize, usize), l: usize, dims0: (usize, usize)) -> Rect {
    level_rect(p, l, 0, dims0)
}

fn check_patch(len: usize, p: (usize, usize), l: usize, dims: &[(usize, usize)]) -> Result<Rect> {
    if dims.len() <= l {
        return Err(Error::Contract(format!("need sizes for levels 0..={l}")));
    }
    let rect = receptive_field(p, l, dims[0]);
    if len != rect.area() {
        return Err(Error::Contract(format!(
            "patch of {len} pixels does not cover the {}x{} receptive field",
            rect.w, rect.h
        )));
    }
    Ok(rect)
}

/// Level-`l` color at `p` from a rendered level-0 patch covering its receptive field.
pub fn rgb_chain(patch: &[[f64; 3]], p: (usize, usize), l: usize, dims: &[(usize, usize)]) -> Result<[f64; 3]> {
    let mut rect = check_patch(patch.len(), p, l, dims)?;
    let mut cur: Vec<[f64; 3]> = patch.to_vec();
    for k in 0..l {
        let (w, h) = dims[k];
        let next_rect = level_rect(p, l, k + 1, dims[k + 1]);
        let mut next = Vec::with_capacity(next_rect.area());
        for (x, y) in next_rect.pixels() {
            let mut v = [0.0; 3];
            for (c, vc) in v.iter_mut().enumerate() {
                *vc = reduce_at(|sx, sy| cur[rect.local(sx, sy)][c], w, h, x, y);
            }
            next.push(v);
        }
        cur = next;
        rect = next_rect;
    }
    Ok(cur[0])
}

/// Gradient of [`rgb_chain`] with respect to every patch pixel.
pub fn rgb_chain_backward(
    d_out: [f64; 3],
    p: (usize, usize),
    l: usize,
    dims: &[(usize, usize)],
) -> Result<Vec<[f64; 3]>> {
    let rects: Vec<Rect> = (0..=l).map(|k| level_rect(p, l, k, dims[k])).collect();
    check_patch(rects[0].area(), p, l, dims)?;
    let mut grad = vec![d_out];
    for k in (0..l).rev() {
        let (w, h) = dims[k];
        let mut below = vec![[0.0; 3]; rects[k].area()];
        for ((x, y), g) in rects[k + 1].pixels().zip(&grad) {
            for (ky, wy) in TAPS.iter().enumerate() {
                let sy = clamp_index(2 * y as isize + ky as isize - 2, h);
                for (kx, wx) in TAPS.iter().enumerate() {
                    let sx = clamp_index(2 * x as isize + kx as isize - 2, w);
                    let wgt = (wy * wx) as f64 / 256.0;
                    let b = &mut below[rects[k].local(sx, sy)];
                    for c in 0..3 {
                        b[c] += wgt * g[c];
                    }
                }
            }
        }
        grad = below;
    }
    Ok(grad)
}

/// Level-`l` median depth at `p` from a level-0 patch (`None` = invalid).
/// Returns the value and the patch index it was taken from, which is where
/// the whole gradient of the output goes.
pub fn depth_chain(
    patch: &[Option<f64>],
    p: (usize, usize),
    l: usize,
    dims: &[(usize, usize)],
) -> Result<Option<(f64, usize)>> {
    let mut rect = check_patch(patch.len(), p, l, dims)?;
    let mut cur: Vec<Option<(f64, usize)>> = patch.iter().enumerate().map(|(i, v)| v.map(|d| (d, i))).collect();
    for k in 0..l {
        let (w, h) = dims[k];
        let next_rect = level_rect(p, l, k + 1, dims[k + 1]);
        let next = next_rect
            .pixels()
            .map(|(x, y)| {
                // window samples outside the tracked block are clipped by the
                // image border, so every in-bounds sample is inside `rect`
                median_at(|sx, sy| cur[rect.local(sx, sy)], w, h, x, y)
            })
            .collect();
        cur = next;
        rect = next_rect;
    }
    Ok(cur[0])
}

/// Weights of the two per-pixel terms of [`coarse_pixel_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelLossWeights {
    /// Multiplies the squared color error summed over channels.
    pub rgb: f64,
    /// Multiplies the absolute depth error.
    pub depth: f64,
}

/// Loss of one coarse pixel and its gradient on the rendered patch.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarsePixelLoss {
    pub rgb: f64,
    /// Zero when the pixel has no valid ground-truth depth.
    pub depth: f64,
    pub depth_valid: bool,
    pub d_rgb: Vec<[f64; 3]>,
    pub d_depth: Vec<f64>,
}

impl CoarsePixelLoss {
    pub fn total(&self) -> f64 {
        self.rgb + self.depth
    }
}

/// `wr · |Rc − c|² + wd · |Rd − d|` at coarse pixel `p` of level `l`, where
/// `Rc`, `Rd` reduce the rendered patch and `c`, `d` come from `gt`.
/// Rendered depths at pixels with invalid ground truth are ignored.
pub fn coarse_pixel_loss(
    rgb_patch: &[[f64; 3]],
    depth_patch: &[f64],
    gt: &FramePyramid,
    p: (usize, usize),
    l: usize,
    weights: &PixelLossWeights,
) -> Result<CoarsePixelLoss> {
    let dims = gt.dims();
    let rect = check_patch(rgb_patch.len(), p, l, &dims)?;
    check_patch(depth_patch.len(), p, l, &dims)?;
    let pred = rgb_chain(rgb_patch, p, l, &dims)?;
    let target = gt.rgb[l].pixel(p.0, p.1);
    let mut rgb = 0.0;
    let mut d_out = [0.0; 3];
    for c in 0..3 {
        let e = pred[c] - target[c];
        rgb += weights.rgb * e * e;
        d_out[c] = 2.0 * weights.rgb * e;
    }
    let d_rgb = rgb_chain_backward(d_out, p, l, &dims)?;

    let mut d_depth = vec![0.0; depth_patch.len()];
    let mut depth = 0.0;
    let mut depth_valid = false;
    if let Some(d_gt) = gt.depth_at(l, p.0, p.1) {
        let w0 = dims[0].0;
        let masked: Vec<Option<f64>> = rect
            .pixels()
            .zip(depth_patch)
            .map(|((x, y), d)| gt.valid[0][y * w0 + x].then_some(*d))
            .collect();
        if let Some((pred_d, src)) = depth_chain(&masked, p, l, &dims)? {
            let e = pred_d - d_gt;
            depth = weights.depth * e.abs();
            d_depth[src] = weights.depth * e.signum();
            depth_valid = true;
        }
    }
    Ok(CoarsePixelLoss {
        rgb,
        depth,
        depth_valid,
        d_rgb,
        d_depth,
    })
}

/// Splits `iterations` evenly over levels `gpl, gpl − 1, …, 0`, giving any
/// remainder to the finest levels. Entry `i` is the count for level `gpl − i`.
pub fn level_schedule(iterations: usize, gpl: usize) -> Vec<(usize, usize)> {
    let n = gpl + 1;
    let base = iterations / n;
    let extra = iterations % n;
    (0..n)
        .map(|i| {
            let level = gpl - i;
            // the last `extra` entries are the finest levels
            let bonus = usize::from(i >= n - extra);
            (level, base + bonus)
        })
        .collect()
}

/// Level to use at iteration `it` (0-based) of a schedule.
pub fn level_at(schedule: &[(usize, usize)], it: usize) -> usize {
    let mut acc = 0;
    for (level, count) in schedule {
        acc += count;
        if it < acc {
            return *level;
        }
    }
    schedule.last().map_or(0, |s| s.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
        let data = (0..w * h * c).map(|_| rng.random::<f64>()).collect();
        Image::from_vec(w, h, c, data).unwrap()
    }

    /// Full 5×5 convolution with clamped borders, then stride 2.
    fn conv_then_stride(img: &Image) -> Image {
        let (w, h) = img.dims();
        let k1 = [1.0, 4.0, 6.0, 4.0, 1.0];
        let mut full = Image::new(w, h, img.channels());
        for y in 0..h as isize {
            for x in 0..w as isize {
                for c in 0..img.channels() {
                    let mut acc = 0.0;
                    for j in 0..5isize {
                        for i in 0..5isize {
                            let sx = (x + i - 2).clamp(0, w as isize - 1) as usize;
                            let sy = (y + j - 2).clamp(0, h as isize - 1) as usize;
                            acc += k1[j as usize] * k1[i as usize] * img.get(sx, sy, c);
                        }
                    }
                    full.set(x as usize, y as usize, c, acc / 256.0);
                }
            }
        }
        Image::from_fn(w.div_ceil(2), h.div_ceil(2), img.channels(), |x, y, c| full.get(2 * x, 2 * y, c))
    }

    #[test]
    fn kernel_sums_to_one() {
        let total: u32 = TAPS.iter().flat_map(|a| TAPS.iter().map(move |b| a * b)).sum();
        assert_eq!(total, 256);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::from_fn(9, 7, 3, |_, _, c| 0.25 + c as f64 * 0.125);
        let out = reduce_rgb(&img).unwrap();
        assert_eq!(out.dims(), (5, 4));
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(out.pixel(x, y), &[0.25, 0.375, 0.5]);
            }
        }
    }

    #[test]
    fn impulse_response_is_the_kernel() {
        let mut img = Image::new(16, 16, 1);
        img.set(8, 8, 0, 1.0);
        let out = reduce_rgb(&img).unwrap();
        // output (x, y) reads input (2x + i − 2, 2y + j − 2)
        for y in 0..8 {
            for x in 0..8 {
                let i = 8 - (2 * x as isize - 2);
                let j = 8 - (2 * y as isize - 2);
                let expect = if (0..5).contains(&i) && (0..5).contains(&j) {
                    (TAPS[i as usize] * TAPS[j as usize]) as f64 / 256.0
                } else {
                    0.0
                };
                assert_eq!(out.get(x, y, 0), expect);
            }
        }
        assert_eq!(out.get(4, 4, 0), 36.0 / 256.0);
        assert_eq!(out.get(3, 4, 0), 6.0 / 256.0);
    }

    #[test]
    fn degenerate_input_is_rejected() {
        assert!(matches!(reduce_rgb(&Image::new(1, 1, 3)), Err(Error::Domain(_))));
    }

    #[test]
    fn reduce_matches_direct_convolution_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (w, h) = (rng.random_range(2..40), rng.random_range(2..40));
            let img = random_image(&mut rng, w, h, 3);
            assert_eq!(reduce_rgb(&img).unwrap(), conv_then_stride(&img));
        }
    }

    #[test]
    fn reduce_commutes_with_channel_slicing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 13, 9, 3);
        let full = reduce_rgb(&img).unwrap();
        for c in 0..3 {
            assert_eq!(reduce_rgb(&img.channel(c)).unwrap(), full.channel(c));
        }
    }

    fn brute_median(depth: &Image, valid: &[bool], x: usize, y: usize) -> Option<f64> {
        let (w, h) = depth.dims();
        let mut v: Vec<f64> = Vec::new();
        for sy in 0..h {
            for sx in 0..w {
                let inside = (sx as isize - 2 * x as isize).abs() <= 2 && (sy as isize - 2 * y as isize).abs() <= 2;
                if inside && valid[sy * w + sx] {
                    v.push(depth.get(sx, sy, 0));
                }
            }
        }
        v.sort_by(f64::total_cmp);
        (!v.is_empty()).then(|| v[(v.len() - 1) / 2])
    }

    #[test]
    fn depth_reduce_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (w, h) = (rng.random_range(2..20), rng.random_range(2..20));
            let depth = random_image(&mut rng, w, h, 1);
            let p_valid = rng.random_range(0.0..1.0);
            let valid: Vec<bool> = (0..w * h).map(|_| rng.random_bool(p_valid)).collect();
            let (out, out_valid) = reduce_depth(&depth, &valid).unwrap();
            for y in 0..out.height() {
                for x in 0..out.width() {
                    let expect = brute_median(&depth, &valid, x, y);
                    assert_eq!(out_valid[y * out.width() + x], expect.is_some());
                    if let Some(e) = expect {
                        assert_eq!(out.get(x, y, 0), e);
                    }
                }
            }
        }
    }

    #[test]
    fn depth_reduce_trivial_cases() {
        let depth = Image::from_fn(10, 8, 1, |_, _, _| 1.5);
        let (out, valid) = reduce_depth(&depth, &[false; 80]).unwrap();
        assert!(valid.iter().all(|v| !v));
        assert_eq!(out.dims(), (5, 4));
        let (out, valid) = reduce_depth(&depth, &[true; 80]).unwrap();
        assert!(valid.iter().all(|v| *v));
        assert!(out.data().iter().all(|v| *v == 1.5));
    }

    #[test]
    fn receptive_sides() {
        assert_eq!((0..4).map(receptive_side).collect::<Vec<_>>(), vec![1, 5, 13, 29]);
        assert_eq!(receptive_field((7, 4), 0, (40, 30)), Rect { x0: 7, y0: 4, w: 1, h: 1 });
        assert_eq!(receptive_field((5, 5), 1, (40, 30)), Rect { x0: 8, y0: 8, w: 5, h: 5 });
        assert_eq!(receptive_field((0, 0), 2, (40, 30)), Rect { x0: 0, y0: 0, w: 7, h: 7 });
    }

    /// Level-0 pixels whose perturbation changes coarse pixel `p`.
    fn probe_support(w: usize, h: usize, p: (usize, usize), l: usize) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = random_image(&mut rng, w, h, 1);
        let reduce_to = |img: &Image| {
            let mut cur = img.clone();
            for _ in 0..l {
                cur = reduce_rgb(&cur).unwrap();
            }
            cur.get(p.0, p.1, 0)
        };
        let v0 = reduce_to(&base);
        let mut hits = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut img = base.clone();
                img.set(x, y, 0, img.get(x, y, 0) + 1.0);
                if reduce_to(&img) != v0 {
                    hits.push((x, y));
                }
            }
        }
        hits
    }

    #[test]
    fn receptive_field_matches_perturbation_probe() {
        let (w, h) = (64, 48);
        for l in 1..=3 {
            let dims = level_dims(w, h, l);
            let (cw, ch) = dims[l];
            for p in [(cw / 2, ch / 2), (0, 0), (cw - 1, ch - 1), (1, ch / 2)] {
                let rect = receptive_field(p, l, (w, h));
                let expect: Vec<(usize, usize)> = rect.pixels().collect();
                let mut got = probe_support(w, h, p, l);
                got.sort_by_key(|(x, y)| (*y, *x));
                assert_eq!(got, expect, "level {l} pixel {p:?}");
                if p == (cw / 2, ch / 2) {
                    assert_eq!((rect.w, rect.h), (receptive_side(l), receptive_side(l)));
                }
            }
        }
    }

    fn patch_of(img: &Image, rect: &Rect) -> Vec<[f64; 3]> {
        rect.pixels().map(|(x, y)| [img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2)]).collect()
    }

    #[test]
    fn patch_chain_reproduces_the_full_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, h) = (37, 29);
        let img = random_image(&mut rng, w, h, 3);
        let mut levels = vec![img.clone()];
        for _ in 0..3 {
            let next = reduce_rgb(levels.last().unwrap()).unwrap();
            levels.push(next);
        }
        let dims = level_dims(w, h, 3);
        for l in 0..=3 {
            let (cw, ch) = dims[l];
            for y in 0..ch {
                for x in 0..cw {
                    let rect = receptive_field((x, y), l, (w, h));
                    let v = rgb_chain(&patch_of(&img, &rect), (x, y), l, &dims).unwrap();
                    assert_eq!(&v, levels[l].pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn depth_chain_reproduces_the_depth_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (33, 21);
        let depth = random_image(&mut rng, w, h, 1);
        let rgb = Image::new(w, h, 3);
        let mut masked = depth.clone();
        for v in masked.data_mut() {
            if rng.random_bool(0.3) {
                *v = 0.0;
            }
        }
        let pyr = FramePyramid::build(&rgb, &masked, 3).unwrap();
        let dims = pyr.dims();
        for l in 0..=3 {
            let (cw, ch) = dims[l];
            for y in 0..ch {
                for x in 0..cw {
                    let rect = receptive_field((x, y), l, (w, h));
                    let patch: Vec<Option<f64>> = rect
                        .pixels()
                        .map(|(sx, sy)| pyr.valid[0][sy * w + sx].then(|| masked.get(sx, sy, 0)))
                        .collect();
                    let got = depth_chain(&patch, (x, y), l, &dims).unwrap();
                    assert_eq!(got.map(|g| g.0), pyr.depth_at(l, x, y));
                    if let Some((v, src)) = got {
                        assert_eq!(patch[src], Some(v));
                    }
                }
            }
        }
    }

    #[test]
    fn level_zero_loss_is_the_plain_pixel_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rgb = random_image(&mut rng, 8, 6, 3);
        let depth = Image::from_fn(8, 6, 1, |x, _, _| 1.0 + x as f64 * 0.1);
        let pyr = FramePyramid::build(&rgb, &depth, 0).unwrap();
        let wts = PixelLossWeights { rgb: 0.5, depth: 2.0 };
        let pred = [0.1, 0.2, 0.3];
        let out = coarse_pixel_loss(&[pred], &[1.45], &pyr, (3, 2), 0, &wts).unwrap();
        let gt = rgb.pixel(3, 2);
        let expect: f64 = (0..3).map(|c| 0.5 * (pred[c] - gt[c]).powi(2)).sum();
        assert!((out.rgb - expect).abs() < 1e-15);
        assert!((out.depth - 2.0 * 0.15).abs() < 1e-12);
        assert_eq!(out.d_depth, vec![2.0]);
    }

    #[test]
    fn perfect_patch_has_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (w, h) = (24, 20);
        let rgb = random_image(&mut rng, w, h, 3);
        let depth = Image::from_fn(w, h, 1, |x, y, _| 1.0 + 0.01 * (x + y) as f64);
        let pyr = FramePyramid::build(&rgb, &depth, 2).unwrap();
        let rect = receptive_field((3, 2), 2, (w, h));
        let d: Vec<f64> = rect.pixels().map(|(x, y)| depth.get(x, y, 0)).collect();
        let wts = PixelLossWeights { rgb: 1.0, depth: 1.0 };
        let out = coarse_pixel_loss(&patch_of(&rgb, &rect), &d, &pyr, (3, 2), 2, &wts).unwrap();
        assert_eq!(out.total(), 0.0);
        assert!(out.d_rgb.iter().all(|g| *g == [0.0; 3]));
    }

    #[test]
    fn short_patch_is_a_contract_error() {
        let rgb = Image::new(16, 16, 3);
        let depth = Image::from_fn(16, 16, 1, |_, _, _| 1.0);
        let pyr = FramePyramid::build(&rgb, &depth, 2).unwrap();
        let wts = PixelLossWeights { rgb: 1.0, depth: 1.0 };
        let r = coarse_pixel_loss(&[[0.0; 3]; 5], &[1.0; 5], &pyr, (4, 4), 2, &wts);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn two_level_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (w, h) = (30, 26);
        let rgb = random_image(&mut rng, w, h, 3);
        let mut depth = random_image(&mut rng, w, h, 1);
        depth.data_mut().iter_mut().for_each(|v| *v += 1.0);
        let pyr = FramePyramid::build(&rgb, &depth, 2).unwrap();
        let wts = PixelLossWeights { rgb: 0.7, depth: 1.3 };
        let p = (4, 3);
        let rect = receptive_field(p, 2, (w, h));
        let cpatch: Vec<[f64; 3]> = (0..rect.area()).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let dpatch: Vec<f64> = (0..rect.area()).map(|_| rng.random_range(1.0..2.0)).collect();
        let out = coarse_pixel_loss(&cpatch, &dpatch, &pyr, p, 2, &wts).unwrap();
        let hstep = 1e-5;
        for i in 0..rect.area() {
            for c in 0..3 {
                let (mut a, mut b) = (cpatch.clone(), cpatch.clone());
                a[i][c] += hstep;
                b[i][c] -= hstep;
                let num = (coarse_pixel_loss(&a, &dpatch, &pyr, p, 2, &wts).unwrap().total()
                    - coarse_pixel_loss(&b, &dpatch, &pyr, p, 2, &wts).unwrap().total())
                    / (2.0 * hstep);
                assert!((num - out.d_rgb[i][c]).abs() <= 1e-3 * num.abs().max(1e-6));
            }
            let (mut a, mut b) = (dpatch.clone(), dpatch.clone());
            a[i] += hstep;
            b[i] -= hstep;
            let num = (coarse_pixel_loss(&cpatch, &a, &pyr, p, 2, &wts).unwrap().total()
                - coarse_pixel_loss(&cpatch, &b, &pyr, p, 2, &wts).unwrap().total())
                / (2.0 * hstep);
            assert!((num - out.d_depth[i]).abs() <= 1e-3 * num.abs().max(1e-6));
        }
    }

    /// Dense Jacobian of one reduce step on a `w × h` single-channel image.
    fn reduce_jacobian(w: usize, h: usize) -> Vec<Vec<f64>> {
        let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
        let mut j = vec![vec![0.0; w * h]; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                for (ky, wy) in TAPS.iter().enumerate() {
                    for (kx, wx) in TAPS.iter().enumerate() {
                        let sx = clamp_index(2 * x as isize + kx as isize - 2, w);
                        let sy = clamp_index(2 * y as isize + ky as isize - 2, h);
                        j[y * ow + x][sy * w + sx] += (wy * wx) as f64 / 256.0;
                    }
                }
            }
        }
        j
    }

    #[test]
    fn chain_gradient_equals_explicit_jacobian_product() {
        let (w, h) = (8, 8);
        let j1 = reduce_jacobian(8, 8);
        let j2 = reduce_jacobian(4, 4);
        let dims = level_dims(w, h, 2);
        for py in 0..2 {
            for px in 0..2 {
                let row = py * 2 + px;
                let mut dense = vec![0.0; 64];
                for (m, j2v) in j2[row].iter().enumerate() {
                    for (n, j1v) in j1[m].iter().enumerate() {
                        dense[n] += j2v * j1v;
                    }
                }
                let g = rgb_chain_backward([1.0, 0.0, 0.0], (px, py), 2, &dims).unwrap();
                let rect = receptive_field((px, py), 2, (w, h));
                for (i, (x, y)) in rect.pixels().enumerate() {
                    assert!((g[i][0] - dense[y * w + x]).abs() < 1e-15);
                }
                let outside: f64 = (0..64)
                    .filter(|n| !rect.contains(n % w, n / w))
                    .map(|n| dense[n].abs())
                    .sum();
                assert_eq!(outside, 0.0);
            }
        }
    }

    #[test]
    fn schedules_split_evenly() {
        assert_eq!(level_schedule(15, 2), vec![(2, 5), (1, 5), (0, 5)]);
        assert_eq!(level_schedule(10, 1), vec![(1, 5), (0, 5)]);
        assert_eq!(level_schedule(8, 2), vec![(2, 2), (1, 3), (0, 3)]);
        assert_eq!(level_schedule(7, 0), vec![(0, 7)]);
        let s = level_schedule(8, 2);
        let seq: Vec<usize> = (0..8).map(|i| level_at(&s, i)).collect();
        assert_eq!(seq, vec![2, 2, 1, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn pyramid_queries_are_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rgb = random_image(&mut rng, 20, 16, 3);
        let depth = random_image(&mut rng, 20, 16, 1);
        assert_eq!(FramePyramid::build(&rgb, &depth, 3).unwrap(), FramePyramid::build(&rgb, &depth, 3).unwrap());
    }

    proptest! {
        #[test]
        fn schedule_conserves_iterations(it in 0usize..200, gpl in 0usize..4) {
            let s = level_schedule(it, gpl);
            prop_assert_eq!(s.iter().map(|x| x.1).sum::<usize>(), it);
            let counts: Vec<usize> = s.iter().map(|x| x.1).collect();
            prop_assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
