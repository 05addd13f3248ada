//! Front-to-back alpha compositing and its exact reverse pass.

use crate::error::{Error, Result};

/// Weights and transmittances of one composited ray.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub depth: f64,
    pub alphas: Vec<f64>,
    /// `T_i`, transmittance before sample `i`.
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
    /// Transmittance after the last sample.
    pub final_transmittance: f64,
    step: f64,
}

impl Composite {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn step(&self) -> f64 {
        self.step
    }
}

/// Gradients with respect to the per-sample inputs of [`composite`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompositeGrads {
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

/// `alpha_i = 1 - exp(-sigma_i * step)`, `T_i = prod_{j<i}(1 - alpha_j)`,
/// `w_i = alpha_i T_i`, color `sum w_i c_i` and depth `sum w_i d_i`.
pub fn composite(sigmas: &[f64], colors: &[[f64; 3]], depths: &[f64], step: f64) -> Composite {
    let n = sigmas.len();
    debug_assert_eq!(colors.len(), n);
    debug_assert_eq!(depths.len(), n);
    let mut out = Composite {
        alphas: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        step,
        ..Default::default()
    };
    let mut t = 1.0;
    for i in 0..n {
        let alpha = -(-sigmas[i] * step).exp_m1();
        let w = alpha * t;
        out.alphas.push(alpha);
        out.transmittance.push(t);
        out.weights.push(w);
        for k in 0..3 {
            out.color[k] += w * colors[i][k];
        }
        out.depth += w * depths[i];
        t *= 1.0 - alpha;
    }
    out.final_transmittance = t;
    out
}

/// Reverse pass of [`composite`].
///
/// `d_weights`, when given, is a direct upstream gradient on each `w_i` (used by
/// the termination prior) and is added to the paths through color and depth.
pub fn composite_backward(
    fwd: &Composite,
    colors: &[[f64; 3]],
    depths: &[f64],
    d_color: [f64; 3],
    d_depth: f64,
    d_weights: Option<&[f64]>,
) -> Result<CompositeGrads> {
    let n = fwd.weights.len();
    if colors.len() != n || depths.len() != n || d_weights.is_some_and(|d| d.len() != n) {
        return Err(Error::Contract(format!(
            "composite backward with {n} recorded samples but inputs of length {}/{}/{}",
            colors.len(),
            depths.len(),
            d_weights.map_or(n, |d| d.len())
        )));
    }
    let step = fwd.step;
    // total upstream on each weight
    let gw: Vec<f64> = (0..n)
        .map(|i| {
            let c = &colors[i];
            d_color[0] * c[0]
                + d_color[1] * c[1]
                + d_color[2] * c[2]
                + d_depth * depths[i]
                + d_weights.map_or(0.0, |d| d[i])
        })
        .collect();
    // dw_i/dsigma_k = step * T_{k+1} for i = k, -step * w_i for i > k
    let mut sigma = vec![0.0; n];
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let t_next = if k + 1 < n {
            fwd.transmittance[k + 1]
        } else {
            fwd.final_transmittance
        };
        sigma[k] = step * (t_next * gw[k] - suffix);
        suffix += fwd.weights[k] * gw[k];
    }
    let color = fwd
        .weights
        .iter()
        .map(|w| [w * d_color[0], w * d_color[1], w * d_color[2]])
        .collect();
    let depth = fwd.weights.iter().map(|w| w * d_depth).collect();
    Ok(CompositeGrads {
        sigma,
        color,
        depth,
    })
}
