//! Trajectory error after rigid alignment, and depth accuracy of a rendered map.

use nalgebra::{Matrix3, SVD};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{associate, Frame, TrajectoryEntry};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::objective::Scene;

/// Relative size of the second principal extent below which points count as collinear.
const COLLINEAR_TOL: f64 = 1e-10;

/// Estimated and reference poses with the index pairs that correspond.
#[derive(Clone, Debug)]
pub struct TrajectoryPair {
    pub estimated: Vec<Pose>,
    pub reference: Vec<Pose>,
    pub pairs: Vec<(usize, usize)>,
}

impl TrajectoryPair {
    /// Pairs the common prefix by frame index.
    pub fn by_index(estimated: Vec<Pose>, reference: Vec<Pose>) -> Self {
        let n = estimated.len().min(reference.len());
        Self {
            estimated,
            reference,
            pairs: (0..n).map(|i| (i, i)).collect(),
        }
    }

    /// Pairs entries one-to-one by nearest timestamp within `max_dt` seconds.
    pub fn by_timestamp(estimated: &[TrajectoryEntry], reference: &[TrajectoryEntry], max_dt: f64) -> Result<Self> {
        let sorted = |e: &[TrajectoryEntry]| {
            let mut v = e.to_vec();
            v.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
            v
        };
        let (est, gt) = (sorted(estimated), sorted(reference));
        let te: Vec<f64> = est.iter().map(|e| e.timestamp).collect();
        let tg: Vec<f64> = gt.iter().map(|e| e.timestamp).collect();
        let pairs = associate(&te, &tg, max_dt);
        Ok(Self {
            estimated: est.into_iter().map(|e| e.pose).collect(),
            reference: gt.into_iter().map(|e| e.pose).collect(),
            pairs,
        })
    }

    fn positions(&self) -> (Vec<Vec3>, Vec<Vec3>) {
        self.pairs
            .iter()
            .map(|&(i, j)| (self.estimated[i].translation, self.reference[j].translation))
            .unzip()
    }

    pub fn ate(&self) -> Result<Ate> {
        let (e, g) = self.positions();
        ate_rmse(&e, &g)
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Ate {
    pub rmse_cm: f64,
    pub pairs: usize,
    /// Maps estimated positions onto the reference.
    #[serde(skip)]
    pub alignment: Pose,
}

/// Rigid transform `T` minimising `Σ |T·e_i − g_i|²` (rotation and translation, no scale).
pub fn align_rigid(est: &[Vec3], gt: &[Vec3]) -> Result<Pose> {
    if est.len() != gt.len() {
        return Err(Error::Alignment(format!("{} estimated vs {} reference points", est.len(), gt.len())));
    }
    let n = est.len();
    if n < 3 {
        return Err(Error::Alignment(format!("need at least 3 pairs, got {n}")));
    }
    let mean = |p: &[Vec3]| p.iter().fold(Vec3::zeros(), |a, b| a + b) / n as f64;
    let (me, mg) = (mean(est), mean(gt));
    let mut cov = Matrix3::zeros();
    let mut scatter_e = Matrix3::zeros();
    let mut scatter_g = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        let (de, dg) = (e - me, g - mg);
        cov += dg * de.transpose();
        scatter_e += de * de.transpose();
        scatter_g += dg * dg.transpose();
    }
    for (name, s) in [("estimated", scatter_e), ("reference", scatter_g)] {
        let mut ev: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        if !(ev[0] > 0.0) || ev[1] <= COLLINEAR_TOL * ev[0] {
            return Err(Error::Alignment(format!("{name} positions are collinear or coincident")));
        }
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    Ok(Pose::new(r, mg - r * me))
}

/// RMSE of position differences without alignment, in the input unit.
pub fn translation_rmse(est: &[Vec3], gt: &[Vec3]) -> f64 {
    let ss: f64 = est.iter().zip(gt).map(|(e, g)| (e - g).norm_squared()).sum();
    (ss / est.len().max(1) as f64).sqrt()
}

/// Absolute trajectory error after rigid alignment; positions in metres, result in cm.
pub fn ate_rmse(est: &[Vec3], gt: &[Vec3]) -> Result<Ate> {
    let t = align_rigid(est, gt)?;
    let aligned: Vec<Vec3> = est.iter().map(|e| t.transform_point(e)).collect();
    Ok(Ate {
        rmse_cm: 100.0 * translation_rmse(&aligned, gt),
        pairs: est.len(),
        alignment: t,
    })
}

/// Anything that can produce a z-depth for a pixel seen from a pose.
pub trait DepthSource: Sync {
    fn z_depth(&self, pose: &Pose, x: usize, y: usize) -> Result<f64>;
}

impl DepthSource for Scene<'_> {
    fn z_depth(&self, pose: &Pose, x: usize, y: usize) -> Result<f64> {
        let r = self.render_pixel(pose, x, y, None)?;
        Ok(r.depth() * self.intrinsics.z_over_range(x as f64, y as f64))
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DepthL1 {
    pub l1_cm: f64,
    pub pixels: usize,
}

/// Mean `|ẑ − z|` over valid ground-truth pixels, in cm.
///
/// With `samples = Some(n)` each view contributes `n` valid pixels drawn
/// without replacement (all of them if fewer exist); `None` uses every valid pixel.
pub fn depth_l1<S: DepthSource>(
    source: &S,
    views: &[(Pose, &Frame)],
    samples: Option<usize>,
    seed: u64,
) -> Result<DepthL1> {
    let mut jobs: Vec<(usize, usize, usize)> = Vec::new();
    for (v, (_, frame)) in views.iter().enumerate() {
        let w = frame.depth.width();
        let valid: Vec<usize> = (0..frame.depth.len())
            .filter(|&i| frame.depth.data()[i] > 0.0)
            .collect();
        let chosen: Vec<usize> = match samples {
            Some(n) if n < valid.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (v as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
                let mut idx: Vec<usize> = sample(&mut rng, valid.len(), n).into_iter().map(|k| valid[k]).collect();
                idx.sort_unstable();
                idx
            }
            _ => valid,
        };
        jobs.extend(chosen.into_iter().map(|i| (v, i % w, i / w)));
    }
    if jobs.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let errs = jobs
        .par_iter()
        .map(|&(v, x, y)| {
            let (pose, frame) = &views[v];
            let z = source.z_depth(pose, x, y)?;
            Ok((z - frame.depth.get(x, y, 0)).abs())
        })
        .collect::<Result<Vec<f64>>>()?;
    let sum: f64 = errs.iter().sum();
    Ok(DepthL1 {
        l1_cm: 100.0 * sum / errs.len() as f64,
        pixels: errs.len(),
    })
}
