//! Per-ray training losses and their cotangents.
//!
//! All losses are evaluated per ray and averaged over the bundle by the
//! caller, so the configured loss weights stay batch-size independent.

use nalgebra::Vector3;
use thiserror::Error;

use crate::field::render::RenderForward;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("depth loss sigma must be > 0 (got {0})")]
    NonPositiveSigma(f64),
    #[error("non-finite {0} loss")]
    NonFinite(&'static str),
}

/// Squared color error for one ray: `sum_c (target_c - rendered_c)^2`.
/// Returns the loss and the cotangent on the rendered color.
pub fn loss_rgb(rendered: &[f64; 3], target: &[f64; 3]) -> (f64, [f64; 3]) {
    let mut value = 0.0;
    let mut cot = [0.0; 3];
    for c in 0..3 {
        let diff = rendered[c] - target[c];
        value += diff * diff;
        cot[c] = 2.0 * diff;
    }
    (value, cot)
}

/// Which quantity the ray-termination depth loss weights by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthLossForm {
    /// Negated log of termination weights: bounded below, concentrates ray
    /// termination mass at the target depth. The default.
    TerminationWeight,
    /// The loss exactly as printed in the source material, using the
    /// accumulated transmittance with no leading negation. Unbounded below;
    /// kept behind this switch for comparison.
    LiteralTransmittance,
}

const DEPTH_WEIGHT_EPS: f64 = 1e-6;

/// Uncertainty-aware depth loss for one ray. The target depth is a distance
/// along the ray. Returns the loss plus cotangents on the per-sample
/// termination weights and transmittances (one of the two is zero depending
/// on the form).
pub fn loss_depth(
    fwd: &RenderForward,
    target_depth: f64,
    sigma: f64,
    form: DepthLossForm,
) -> Result<(f64, Vec<f64>, Vec<f64>), LossError> {
    if sigma <= 0.0 {
        return Err(LossError::NonPositiveSigma(sigma));
    }
    let n = fwd.distances.len();
    let mut weight_cot = vec![0.0; n];
    let mut trans_cot = vec![0.0; n];
    let mut value = 0.0;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    for t in 0..n {
        let diff = fwd.distances[t] - target_depth;
        let gaussian = (-diff * diff * inv_two_sigma2).exp();
        if gaussian == 0.0 {
            continue;
        }
        match form {
            DepthLossForm::TerminationWeight => {
                let w = fwd.weights[t] + DEPTH_WEIGHT_EPS;
                value += -w.ln() * gaussian * fwd.deltas[t];
                weight_cot[t] = -gaussian * fwd.deltas[t] / w;
            }
            DepthLossForm::LiteralTransmittance => {
                let tr = fwd.transmittances[t].max(f64::MIN_POSITIVE);
                value += tr.ln() * gaussian * fwd.deltas[t];
                trans_cot[t] = gaussian * fwd.deltas[t] / tr;
            }
        }
    }
    if !value.is_finite() {
        return Err(LossError::NonFinite("depth"));
    }
    Ok((value, weight_cot, trans_cot))
}

/// Normal consistency for one ray: L1 difference plus cosine term,
/// `|target - rendered|_1 + |1 - target . rendered|`. Both normals are unit
/// vectors in the same (camera) frame. Returns the loss and the cotangent on
/// the rendered normal.
pub fn loss_normal(rendered: &Vector3<f64>, target: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let mut value = 0.0;
    let mut cot = Vector3::zeros();
    for k in 0..3 {
        let diff = target[k] - rendered[k];
        value += diff.abs();
        cot[k] += -diff.signum();
    }
    let dot = target.dot(rendered);
    value += (1.0 - dot).abs();
    cot += -target * (1.0 - dot).signum();
    (value, cot)
}

/// Spread of the ray-termination distribution: the pairwise midpoint term
/// plus the per-interval self term. O(n) via prefix sums over the sorted
/// midpoints. Returns the loss and the cotangent on the weights.
pub fn loss_distortion(fwd: &RenderForward) -> (f64, Vec<f64>) {
    let n = fwd.distances.len();
    let mut cot = vec![0.0; n];
    if n == 0 {
        return (0.0, cot);
    }
    let midpoints: Vec<f64> = (0..n)
        .map(|t| fwd.distances[t] + 0.5 * fwd.deltas[t])
        .collect();
    // Midpoints are ascending because distances are sorted and deltas are
    // the gaps; prefix sums make sum_j w_j |m_i - m_j| linear.
    let mut prefix_w = vec![0.0; n + 1];
    let mut prefix_wm = vec![0.0; n + 1];
    for t in 0..n {
        prefix_w[t + 1] = prefix_w[t] + fwd.weights[t];
        prefix_wm[t + 1] = prefix_wm[t] + fwd.weights[t] * midpoints[t];
    }
    let total_w = prefix_w[n];
    let total_wm = prefix_wm[n];
    let mut pairwise = 0.0;
    let mut self_term = 0.0;
    for t in 0..n {
        let below_w = prefix_w[t];
        let below_wm = prefix_wm[t];
        let above_w = total_w - prefix_w[t + 1];
        let above_wm = total_wm - prefix_wm[t + 1];
        // sum_j w_j |m_t - m_j| over j != t (the j = t term is zero).
        let abs_sum = midpoints[t] * below_w - below_wm + above_wm - midpoints[t] * above_w;
        pairwise += fwd.weights[t] * abs_sum;
        self_term += fwd.weights[t] * fwd.weights[t] * fwd.deltas[t];
        cot[t] = 2.0 * abs_sum + (2.0 / 3.0) * fwd.weights[t] * fwd.deltas[t];
    }
    (pairwise + self_term / 3.0, cot)
}

const PROPOSAL_EPS: f64 = 1e-6;

/// Interlevel consistency: penalizes final-render mass in a coarse interval
/// exceeding what the coarse pass predicted there. Exact gradients flow to
/// both sides (coarse prediction and binned fine mass), so the full
/// regularizer passes finite-difference checks.
///
/// `coarse_dists` are the coarse sample positions (interval k spans
/// `[coarse[k], coarse[k+1])`, the last one ending at `far`). Returns
/// `(value, coarse weight cotangents, fine weight cotangents)`.
pub fn loss_proposal(
    coarse_dists: &[f64],
    coarse_weights: &[f64],
    fine_dists: &[f64],
    fine_weights: &[f64],
    far: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let n = coarse_dists.len();
    let mut coarse_cot = vec![0.0; n];
    let mut fine_cot = vec![0.0; fine_dists.len()];
    if n == 0 {
        return (0.0, coarse_cot, fine_cot);
    }
    // Bin fine mass into coarse intervals.
    let mut fine_mass = vec![0.0; n];
    let mut fine_bin = vec![usize::MAX; fine_dists.len()];
    for (t, (d, w)) in fine_dists.iter().zip(fine_weights).enumerate() {
        if *d >= far {
            continue;
        }
        // Linear scan is fine at these sizes; distances are sorted.
        let mut k = 0;
        while k + 1 < n && coarse_dists[k + 1] <= *d {
            k += 1;
        }
        fine_mass[k] += w;
        fine_bin[t] = k;
    }
    let mut value = 0.0;
    let mut mass_cot = vec![0.0; n];
    for k in 0..n {
        let denom = coarse_weights[k] + PROPOSAL_EPS;
        let excess = fine_mass[k] - coarse_weights[k];
        if excess > 0.0 {
            value += excess * excess / denom;
            // d/dw [ (m - w)^2 / (w + eps) ]
            coarse_cot[k] = -2.0 * excess / denom - excess * excess / (denom * denom);
            mass_cot[k] = 2.0 * excess / denom;
        }
    }
    for (t, bin) in fine_bin.iter().enumerate() {
        if *bin != usize::MAX {
            fine_cot[t] = mass_cot[*bin];
        }
    }
    (value, coarse_cot, fine_cot)
}

/// Loss component values for one step (bundle means).
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub depth: f64,
    pub normal: f64,
    pub distortion: f64,
    pub proposal: f64,
}

/// Fixed combination weights; defaults follow the published formulation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub depth: f64,
    pub normal: f64,
    pub distortion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 0.001,
            normal: 0.00001,
            distortion: 0.002,
        }
    }
}

/// Weighted total: `rgb + w_d * depth + w_n * normal + (proposal + w_dist * distortion)`.
pub fn total_loss(components: &LossBreakdown, weights: &LossWeights) -> Result<f64, LossError> {
    for (name, value) in [
        ("rgb", components.rgb),
        ("depth", components.depth),
        ("normal", components.normal),
        ("distortion", components.distortion),
        ("proposal", components.proposal),
    ] {
        if !value.is_finite() {
            return Err(LossError::NonFinite(match name {
                "rgb" => "rgb",
                "depth" => "depth",
                "normal" => "normal",
                "distortion" => "distortion",
                _ => "proposal",
            }));
        }
    }
    Ok(components.rgb
        + weights.depth * components.depth
        + weights.normal * components.normal
        + components.proposal
        + weights.distortion * components.distortion)
}
