//! Target ray-termination distributions and the KL depth regularizer.
//!
//! The custom target comes from an idealized density bump
//! `σ̃(r) = S sech²((r − d′)/σ_d)` whose transmittance integrates in closed
//! form, giving
//!
//! ```text
//! w̃(r) = S sech²((r − d′)/σ_d) · exp(−S σ_d [tanh((r − d′)/σ_d) − tanh(−d′/σ_d)])
//! ```
//!
//! The shift `d′` is chosen so that the expected termination depth equals the
//! measurement `d`, using two integrals `A` and `B` computed once per run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added inside the logarithm of the predicted weights.
pub const LOG_EPS: f64 = 1e-10;

/// Half-width of the quadrature domain in `y = (r − d′)/σ_d`.
pub const QUADRATURE_HALF_WIDTH: f64 = 12.0;

/// Successive trapezoid estimates must agree to this before refinement stops.
pub const QUADRATURE_TOL: f64 = 1e-8;

/// Which target distribution the KL term pulls towards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlTarget {
    /// No KL term.
    None,
    /// The sech²-derived distribution.
    #[default]
    Custom,
    /// A narrow normal density centred on the measurement.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminationConfig {
    pub target: KlTarget,
    /// Density scale `S`, per metric unit.
    pub scale: f64,
    /// Width `σ_d`, metric.
    pub sigma_d: f64,
}

impl Default for TerminationConfig {
    fn default() -> Self {
        Self {
            target: KlTarget::Custom,
            scale: 10_000.0,
            sigma_d: 0.02,
        }
    }
}

impl TerminationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite() && self.sigma_d > 0.0 && self.sigma_d.is_finite()) {
            return Err(Error::Config("termination scale and sigma_d must be positive".into()));
        }
        Ok(())
    }
}

fn sech2(y: f64) -> f64 {
    let c = y.cosh();
    1.0 / (c * c)
}

/// Trapezoid rule on `[-Y, Y]`, doubling the interval count until two
/// successive estimates agree to [`QUADRATURE_TOL`]. Returns the estimate and
/// the final interval count.
fn adaptive_trapezoid(f: impl Fn(f64) -> f64) -> (f64, usize) {
    let (lo, hi) = (-QUADRATURE_HALF_WIDTH, QUADRATURE_HALF_WIDTH);
    let mut n = 256usize;
    let mut h = (hi - lo) / n as f64;
    let mut sum = 0.5 * (f(lo) + f(hi)) + (1..n).map(|i| f(lo + i as f64 * h)).sum::<f64>();
    let mut est = sum * h;
    loop {
        // the new midpoints of every interval
        sum += (0..n).map(|i| f(lo + (i as f64 + 0.5) * h)).sum::<f64>();
        n *= 2;
        h *= 0.5;
        let next = sum * h;
        if (next - est).abs() < QUADRATURE_TOL || n >= 1 << 24 {
            return (next, n);
        }
        est = next;
    }
}

/// `A = ∫ y sech²(y) e^{−Sσ_d(tanh y + 1)} dy` and
/// `B = ∫ sech²(y) e^{−Sσ_d(tanh y + 1)} dy` over `[−12, 12]`.
pub fn compute_ab(scale: f64, sigma_d: f64) -> Result<(f64, f64)> {
    if !(scale > 0.0 && sigma_d > 0.0 && scale.is_finite() && sigma_d.is_finite()) {
        return Err(Error::Domain(format!(
            "target distribution needs S > 0 and sigma_d > 0, got S = {scale}, sigma_d = {sigma_d}"
        )));
    }
    let k = scale * sigma_d;
    let kernel = |y: f64| sech2(y) * (-k * (y.tanh() + 1.0)).exp();
    let (a, _) = adaptive_trapezoid(|y| y * kernel(y));
    let (b, _) = adaptive_trapezoid(kernel);
    Ok((a, b))
}

/// The shift `d′` for one measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectedMean {
    pub d_prime: f64,
    /// Set when `d ≤ 3σ_d`, where the `tanh(−d′/σ_d) ≈ −1` simplification
    /// behind `A` and `B` no longer holds well.
    pub degraded: bool,
}

/// Parameters of the custom target distribution with its precomputed integrals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetDistribution {
    pub scale: f64,
    pub sigma_d: f64,
    pub a: f64,
    pub b: f64,
}

impl TargetDistribution {
    pub fn new(scale: f64, sigma_d: f64) -> Result<Self> {
        let (a, b) = compute_ab(scale, sigma_d)?;
        Ok(Self { scale, sigma_d, a, b })
    }

    pub fn from_config(cfg: &TerminationConfig) -> Result<Self> {
        Self::new(cfg.scale, cfg.sigma_d)
    }

    /// `d′ = (d − S σ_d² A) / (S σ_d B)`.
    pub fn corrected_mean(&self, d: f64) -> Result<CorrectedMean> {
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::Domain(format!("depth measurement must be positive, got {d}")));
        }
        let s = self.scale;
        let sd = self.sigma_d;
        Ok(CorrectedMean {
            d_prime: (d - s * sd * sd * self.a) / (s * sd * self.b),
            degraded: d <= 3.0 * sd,
        })
    }

    /// The tail constant `C = tanh(−d′/σ_d)`.
    pub fn tail_constant(&self, d_prime: f64) -> f64 {
        (-d_prime / self.sigma_d).tanh()
    }

    /// Closed-form `w̃(r)` for shift `d′`.
    pub fn target_w(&self, r: f64, d_prime: f64) -> f64 {
        let y = (r - d_prime) / self.sigma_d;
        let c = self.tail_constant(d_prime);
        self.scale * sech2(y) * (-self.scale * self.sigma_d * (y.tanh() - c)).exp()
    }

    /// Total mass `∫₀^∞ w̃ = 1 − exp(−Sσ_d(1 − C))`.
    pub fn total_mass(&self, d_prime: f64) -> f64 {
        -(-self.scale * self.sigma_d * (1.0 - self.tail_constant(d_prime))).exp_m1()
    }

    /// Location of the maximum of `w̃`.
    pub fn mode(&self, d_prime: f64) -> f64 {
        // d/dy log w̃ = −2 tanh y − Sσ_d sech² y = 0, a quadratic in tanh y
        let k = self.scale * self.sigma_d;
        let t = (1.0 - (1.0 + k * k).sqrt()) / k;
        d_prime + self.sigma_d * t.atanh()
    }

    /// Discretized target `w̃(r_k) Δ` at the given sample depths.
    pub fn discretize(&self, depths: &[f64], step: f64, d: f64) -> Result<Vec<f64>> {
        let dp = self.corrected_mean(d)?.d_prime;
        Ok(depths.iter().map(|r| self.target_w(*r, dp) * step).collect())
    }
}

/// Normal density with mean `d` and standard deviation `sigma_d`.
pub fn target_w_gaussian(r: f64, d: f64, sigma_d: f64) -> f64 {
    let z = (r - d) / sigma_d;
    (-0.5 * z * z).exp() / (sigma_d * (2.0 * std::f64::consts::PI).sqrt())
}

/// Gaussian target evaluated at the sample depths and renormalized to sum
/// to one. All zeros when no sample carries any mass.
pub fn gaussian_targets(depths: &[f64], d: f64, sigma_d: f64) -> Vec<f64> {
    let raw: Vec<f64> = depths.iter().map(|r| target_w_gaussian(*r, d, sigma_d)).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|v| v / total).collect()
    } else {
        raw
    }
}

/// Per-sample KL targets for one ray under the configured target kind.
pub fn ray_targets(
    kind: KlTarget,
    td: &TargetDistribution,
    depths: &[f64],
    step: f64,
    d: f64,
) -> Result<Vec<f64>> {
    match kind {
        KlTarget::None => Ok(vec![0.0; depths.len()]),
        KlTarget::Custom => td.discretize(depths, step, d),
        KlTarget::Gaussian => Ok(gaussian_targets(depths, d, td.sigma_d)),
    }
}

/// Cross-entropy `−Σ_k log(w_k + ε) q_k` of one ray and its gradient in `w`.
pub fn kl_ray(weights: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if weights.len() != targets.len() {
        return Err(Error::Contract(format!(
            "KL term with {} weights but {} targets",
            weights.len(),
            targets.len()
        )));
    }
    let mut loss = 0.0;
    let grad = weights
        .iter()
        .zip(targets)
        .map(|(w, q)| {
            loss -= (w + LOG_EPS).ln() * q;
            -q / (w + LOG_EPS)
        })
        .collect();
    Ok((loss, grad))
}

/// One ray's contribution to the KL batch.
#[derive(Clone, Copy, Debug)]
pub struct KlRay<'a> {
    pub weights: &'a [f64],
    pub targets: &'a [f64],
}

/// Batch KL loss `(1/N) Σ_rays kl_ray` with per-ray weight gradients.
pub fn kl_loss(rays: &[KlRay<'_>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if rays.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let inv_n = 1.0 / rays.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(rays.len());
    for r in rays {
        let (l, mut g) = kl_ray(r.weights, r.targets)?;
        total += l;
        g.iter_mut().for_each(|v| *v *= inv_n);
        grads.push(g);
    }
    Ok((total * inv_n, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PROFILES: [(f64, f64); 3] = [(10_000.0, 0.02), (5_000.0, 0.04), (10_000.0, 0.01)];

    /// Riemann sums of `w̃` and `r w̃` on a fine grid over `[0, d + 40σ_d]`.
    fn riemann(td: &TargetDistribution, d_prime: f64, d: f64) -> (f64, f64) {
        let dr = td.sigma_d / 400.0;
        let n = ((d + 40.0 * td.sigma_d) / dr) as usize;
        let (mut mass, mut mean) = (0.0, 0.0);
        for k in 0..n {
            let r = (k as f64 + 0.5) * dr;
            let w = td.target_w(r, d_prime);
            mass += w * dr;
            mean += r * w * dr;
        }
        (mass, mean)
    }

    #[test]
    fn b_matches_its_closed_form() {
        for (s, sd) in PROFILES {
            let td = TargetDistribution::new(s, sd).unwrap();
            let closed = -(-2.0 * s * sd).exp_m1();
            assert!((s * sd * td.b - closed).abs() < 1e-6);
        }
    }

    #[test]
    fn a_vanishes_in_the_flat_limit() {
        let (a, b) = compute_ab(1e-6, 1e-6).unwrap();
        assert!(a.abs() < 1e-8);
        assert!((b - 2.0).abs() < 1e-6);
    }

    #[test]
    fn quadrature_is_stable_under_refinement() {
        let k: f64 = 10_000.0 * 0.02;
        let kernel = |y: f64| sech2(y) * (-k * (y.tanh() + 1.0)).exp();
        let (b, n) = adaptive_trapezoid(kernel);
        let h = 2.0 * QUADRATURE_HALF_WIDTH / (2 * n) as f64;
        let finer: f64 = (0..=2 * n)
            .map(|i| {
                let w = if i == 0 || i == 2 * n { 0.5 } else { 1.0 };
                w * kernel(-QUADRATURE_HALF_WIDTH + i as f64 * h)
            })
            .sum::<f64>()
            * h;
        assert!((finer - b).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_positive_parameters() {
        assert!(matches!(compute_ab(0.0, 0.02), Err(Error::Domain(_))));
        assert!(matches!(compute_ab(100.0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_a_reduces_to_scaled_depth() {
        let td = TargetDistribution {
            scale: 100.0,
            sigma_d: 0.05,
            a: 0.0,
            b: 0.3,
        };
        let dp = td.corrected_mean(1.5).unwrap().d_prime;
        assert_eq!(dp, 1.5 / (100.0 * 0.05 * 0.3));
    }

    #[test]
    fn corrected_mean_centres_the_expectation() {
        for (s, sd) in PROFILES {
            let td = TargetDistribution::new(s, sd).unwrap();
            for d in [0.5, 1.0, 2.0] {
                let c = td.corrected_mean(d).unwrap();
                assert!(!c.degraded);
                let (mass, mean) = riemann(&td, c.d_prime, d);
                assert!((mean - d).abs() <= 1e-3 * d, "S={s} σ={sd} d={d}: {mean}");
                assert!((mass - td.total_mass(c.d_prime)).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn shallow_measurements_raise_the_flag() {
        let td = TargetDistribution::new(10_000.0, 0.02).unwrap();
        assert!(td.corrected_mean(0.05).unwrap().degraded);
        assert!(td.corrected_mean(-1.0).is_err());
    }

    #[test]
    fn target_vanishes_near_the_camera() {
        let td = TargetDistribution::new(10_000.0, 0.02).unwrap();
        let dp = td.corrected_mean(1.0).unwrap().d_prime;
        assert!(td.target_w(1e-6, dp) < 1e-30);
    }

    #[test]
    fn mode_matches_grid_search() {
        for (s, sd) in PROFILES {
            let td = TargetDistribution::new(s, sd).unwrap();
            let dp = td.corrected_mean(1.0).unwrap().d_prime;
            let dr = sd / 1000.0;
            let best = (0..20_000)
                .map(|k| dp - 10.0 * sd + k as f64 * dr)
                .max_by(|a, b| td.target_w(*a, dp).total_cmp(&td.target_w(*b, dp)))
                .unwrap();
            assert!((td.mode(dp) - best).abs() < sd / 10.0);
        }
    }

    #[test]
    fn gaussian_peak_symmetry_and_normalization() {
        let sd = 0.03;
        let peak = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
        assert!((target_w_gaussian(1.2, 1.2, sd) - peak).abs() < 1e-12);
        for delta in [0.001, 0.01, 0.05] {
            let a = target_w_gaussian(1.2 + delta, 1.2, sd);
            let b = target_w_gaussian(1.2 - delta, 1.2, sd);
            assert!((a - b).abs() < 1e-12);
        }
        let depths: Vec<f64> = (0..200).map(|k| 1.0 + k as f64 * 0.003).collect();
        let q = gaussian_targets(&depths, 1.2, sd);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_factor_out_the_log() {
        let td = TargetDistribution::new(10_000.0, 0.02).unwrap();
        let step = 0.004;
        let depths: Vec<f64> = (0..100).map(|k| 0.8 + k as f64 * step).collect();
        let q = td.discretize(&depths, step, 1.0).unwrap();
        let m = depths.len() as f64;
        let w = vec![1.0 / m; depths.len()];
        let (loss, _) = kl_ray(&w, &q).unwrap();
        let expect = -(1.0 / m).ln() * q.iter().sum::<f64>();
        assert!((loss - expect).abs() < 1e-8 * expect.abs());
    }

    #[test]
    fn matched_weights_minimise_the_loss() {
        let td = TargetDistribution::new(5_000.0, 0.04).unwrap();
        let step = 0.005;
        let depths: Vec<f64> = (0..120).map(|k| 1.6 + k as f64 * step).collect();
        let q = td.discretize(&depths, step, 2.0).unwrap();
        let mass: f64 = q.iter().sum();
        let base = kl_ray(&q, &q).unwrap().0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut w: Vec<f64> = q.iter().map(|v| v * rng.random_range(0.5..1.5) + 1e-6 * rng.random::<f64>()).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v *= mass / s);
            assert!(kl_ray(&w, &q).unwrap().0 >= base - 1e-12);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 40;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.2)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.1)).collect();
        let (_, g) = kl_ray(&w, &q).unwrap();
        let h = 1e-7;
        for i in 0..n {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let num = (kl_ray(&wp, &q).unwrap().0 - kl_ray(&wm, &q).unwrap().0) / (2.0 * h);
            assert!((num - g[i]).abs() <= 1e-3 * num.abs().max(1e-6));
        }
    }

    #[test]
    fn length_mismatch_is_a_contract_error() {
        assert!(matches!(kl_ray(&[0.1, 0.2], &[0.1]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn batch_loss_ignores_ray_order(seed in 0u64..1000, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
                .map(|_| {
                    let m = rng.random_range(1..20);
                    let w = (0..m).map(|_| rng.random::<f64>()).collect();
                    let q = (0..m).map(|_| rng.random::<f64>()).collect();
                    (w, q)
                })
                .collect();
            let rays: Vec<KlRay> = data.iter().map(|(w, q)| KlRay { weights: w, targets: q }).collect();
            let mut rev = rays.clone();
            rev.reverse();
            let (a, _) = kl_loss(&rays).unwrap();
            let (b, _) = kl_loss(&rev).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
