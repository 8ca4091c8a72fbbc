//! Ray sampling and volume rendering (compositing) with an exact backward.
//!
//! Two-level sampling: stratified coarse samples, then importance samples
//! drawn from the piecewise-constant distribution of coarse termination
//! weights (with a small uniform floor so empty space still gets coverage).
//! Rendering accumulates color, expected depth, and normals from per-sample
//! termination weights `w_t = T_t (1 - exp(-rho_t dt))`.

use nalgebra::Vector3;
use rand::rngs::StdRng;
use rand::Rng;

/// Depth normalization floor: rendered depth is `sum(w d) / max(sum w, eps)`.
pub const OPACITY_EPS: f64 = 1e-10;
/// Accumulated normals shorter than this are reported undefined.
pub const NORMAL_EPS: f64 = 1e-12;

/// One stratified sample per uniform stratum of `[near, far]`.
pub fn stratified_samples(near: f64, far: f64, count: usize, rng: &mut StdRng) -> Vec<f64> {
    let span = far - near;
    (0..count)
        .map(|k| near + span * ((k as f64 + rng.random_range(0.0..1.0)) / count as f64))
        .collect()
}

/// Inverse-CDF sampling from the histogram of coarse weights over the coarse
/// intervals. A uniform floor keeps zero-weight regions sampled, so a
/// zero-density field degrades to uniform sampling.
pub fn importance_samples(
    coarse: &[f64],
    weights: &[f64],
    far: f64,
    count: usize,
    floor: f64,
    rng: &mut StdRng,
) -> Vec<f64> {
    debug_assert_eq!(coarse.len(), weights.len());
    if coarse.is_empty() || count == 0 {
        return Vec::new();
    }
    // Interval k spans [coarse[k], coarse[k+1]); the last interval runs to
    // `far`.
    let n = coarse.len();
    let mut mass = Vec::with_capacity(n);
    let mut total = 0.0;
    for k in 0..n {
        let m = weights[k].max(0.0) + floor;
        mass.push(m);
        total += m;
    }
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for m in &mass {
        acc += m / total;
        cdf.push(acc);
    }
    cdf[n] = 1.0;

    (0..count)
        .map(|_| {
            let u: f64 = rng.random_range(0.0..1.0);
            // Binary search for the interval containing u.
            let mut lo = 0;
            let mut hi = n;
            while lo + 1 < hi {
                let mid = (lo + hi) / 2;
                if cdf[mid] <= u {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let seg = (u - cdf[lo]) / (cdf[lo + 1] - cdf[lo]).max(1e-12);
            let start = coarse[lo];
            let end = if lo + 1 < n { coarse[lo + 1] } else { far };
            start + seg * (end - start)
        })
        .collect()
}

/// Merges two sorted-ish distance lists into one strictly increasing list.
pub fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    out.sort_by(|x, y| x.total_cmp(y));
    out.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
    out
}

/// Forward rendering state kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct RenderForward {
    pub distances: Vec<f64>,
    pub deltas: Vec<f64>,
    pub densities: Vec<f64>,
    /// Transmittance *before* each sample; `T_0 = 1`.
    pub transmittances: Vec<f64>,
    pub alphas: Vec<f64>,
    pub weights: Vec<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
    /// Pre-normalization accumulated normal and its magnitude (diagnostic).
    pub normal_accum: Vector3<f64>,
    /// Unit rendered normal; zero vector when undefined.
    pub normal: Vector3<f64>,
}

/// Composites color, depth, and normal along one ray. `delta_cap` bounds the
/// last sample's interval (typically `far - d_last`). Empty sample lists
/// yield a zero-opacity output.
pub fn render_forward(
    distances: &[f64],
    densities: &[f64],
    colors: &[[f64; 3]],
    normals: &[Option<Vector3<f64>>],
    delta_cap: f64,
) -> RenderForward {
    let n = distances.len();
    let mut fwd = RenderForward {
        distances: distances.to_vec(),
        densities: densities.to_vec(),
        ..Default::default()
    };
    if n == 0 {
        fwd.transmittances = vec![];
        return fwd;
    }
    fwd.deltas = (0..n)
        .map(|t| {
            if t + 1 < n {
                distances[t + 1] - distances[t]
            } else {
                delta_cap.max(0.0)
            }
        })
        .collect();

    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut depth_sum = 0.0;
    let mut normal_accum = Vector3::zeros();
    let mut opacity = 0.0;
    for t in 0..n {
        fwd.transmittances.push(transmittance);
        let alpha = 1.0 - (-densities[t] * fwd.deltas[t]).exp();
        let weight = transmittance * alpha;
        fwd.alphas.push(alpha);
        fwd.weights.push(weight);
        for c in 0..3 {
            color[c] += weight * colors[t][c];
        }
        depth_sum += weight * distances[t];
        if let Some(nrm) = normals[t] {
            normal_accum += nrm * weight;
        }
        opacity += weight;
        transmittance *= 1.0 - alpha;
    }
    fwd.opacity = opacity;
    fwd.color = color;
    fwd.depth = depth_sum / opacity.max(OPACITY_EPS);
    fwd.normal_accum = normal_accum;
    fwd.normal = if normal_accum.norm() > NORMAL_EPS {
        normal_accum.normalize()
    } else {
        Vector3::zeros()
    };
    fwd
}

/// Cotangents on the rendered quantities.
#[derive(Clone, Debug, Default)]
pub struct RenderCotangents {
    pub color: [f64; 3],
    pub depth: f64,
    /// Cotangent on the *unit* rendered normal.
    pub normal: Vector3<f64>,
    pub opacity: f64,
    /// Direct per-sample weight cotangents (depth and regularizer losses).
    pub weights: Vec<f64>,
    /// Direct per-sample transmittance cotangents (literal-form depth loss).
    pub transmittances: Vec<f64>,
}

impl RenderCotangents {
    pub fn zeros(n: usize) -> Self {
        Self {
            weights: vec![0.0; n],
            transmittances: vec![0.0; n],
            ..Default::default()
        }
    }
}

/// Per-sample cotangents produced by the rendering backward.
#[derive(Clone, Debug)]
pub struct SampleCotangentSet {
    pub density: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    /// Cotangent on each sample's unit normal (zero where no normal).
    pub normal: Vec<Vector3<f64>>,
}

/// Exact reverse pass of [`render_forward`].
pub fn render_backward(
    fwd: &RenderForward,
    colors: &[[f64; 3]],
    normals: &[Option<Vector3<f64>>],
    cot: &RenderCotangents,
) -> SampleCotangentSet {
    let n = fwd.distances.len();
    let mut out = SampleCotangentSet {
        density: vec![0.0; n],
        color: vec![[0.0; 3]; n],
        normal: vec![Vector3::zeros(); n],
    };
    if n == 0 {
        return out;
    }

    // Fold output cotangents into per-sample weight cotangents.
    let mut weight_cot = cot.weights.clone();
    debug_assert_eq!(weight_cot.len(), n);
    let opacity_clamped = fwd.opacity.max(OPACITY_EPS);
    let depth_dopacity = if fwd.opacity > OPACITY_EPS {
        -fwd.depth / opacity_clamped
    } else {
        0.0
    };
    // Normal normalization backward.
    let accum_norm = fwd.normal_accum.norm();
    let accum_cot = if accum_norm > NORMAL_EPS {
        let unit = fwd.normal_accum / accum_norm;
        (cot.normal - unit * unit.dot(&cot.normal)) / accum_norm
    } else {
        Vector3::zeros()
    };

    for t in 0..n {
        let mut wc = 0.0;
        for c in 0..3 {
            wc += cot.color[c] * colors[t][c];
        }
        wc += cot.depth * (fwd.distances[t] / opacity_clamped + depth_dopacity);
        if let Some(nrm) = normals[t] {
            wc += accum_cot.dot(&nrm);
            out.normal[t] = accum_cot * fwd.weights[t];
        }
        wc += cot.opacity;
        weight_cot[t] += wc;
        out.color[t] = [
            cot.color[0] * fwd.weights[t],
            cot.color[1] * fwd.weights[t],
            cot.color[2] * fwd.weights[t],
        ];
    }

    // Density cotangents via suffix accumulation:
    //   d w_t / d rho_t = T_t dt exp(-rho_t dt)
    //   d w_s / d rho_t = -dt w_s           (s > t)
    //   d T_s / d rho_t = -dt T_s           (s > t)
    let mut weight_suffix = 0.0; // sum_{s > t} wbar_s w_s
    let mut trans_suffix = 0.0; // sum_{s > t} Tbar_s T_s
    for t in (0..n).rev() {
        let own = weight_cot[t] * fwd.transmittances[t] * (1.0 - fwd.alphas[t]) * fwd.deltas[t];
        out.density[t] = own - fwd.deltas[t] * (weight_suffix + trans_suffix);
        weight_suffix += weight_cot[t] * fwd.weights[t];
        trans_suffix += cot.transmittances[t] * fwd.transmittances[t];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn stratified_puts_one_sample_per_stratum() {
        let mut rng = StdRng::seed_from_u64(1);
        let samples = stratified_samples(0.0, 1.0, 4, &mut rng);
        assert_eq!(samples.len(), 4);
        for (k, s) in samples.iter().enumerate() {
            let lo = k as f64 * 0.25;
            assert!(*s >= lo && *s < lo + 0.25, "sample {s} outside stratum {k}");
        }
    }

    #[test]
    fn importance_sampling_degrades_to_uniform_for_zero_weights() {
        let mut rng = StdRng::seed_from_u64(2);
        let coarse: Vec<f64> = (0..8).map(|k| k as f64 / 8.0).collect();
        let weights = vec![0.0; 8];
        let fine = importance_samples(&coarse, &weights, 1.0, 4000, 0.01, &mut rng);
        // Count per original stratum; uniform within ~5 sigma.
        let mut counts = [0usize; 8];
        for f in &fine {
            counts[((f * 8.0) as usize).min(7)] += 1;
        }
        for c in counts {
            assert!((c as f64 - 500.0).abs() < 120.0, "counts {counts:?}");
        }
    }

    #[test]
    fn importance_sampling_concentrates_in_an_opaque_slab() {
        // Inverse-CDF oracle: with weights 1 inside the slab strata and 0
        // elsewhere plus floor f, expected in-slab fraction is
        // slab_mass / total_mass.
        let mut rng = StdRng::seed_from_u64(3);
        let n = 16;
        let coarse: Vec<f64> = (0..n).map(|k| k as f64 / n as f64).collect();
        let weights: Vec<f64> = (0..n)
            .map(|k| if (6..10).contains(&k) { 1.0 } else { 0.0 })
            .collect();
        let floor = 0.01 / n as f64;
        let fine = importance_samples(&coarse, &weights, 1.0, 10_000, floor, &mut rng);
        let inside = fine
            .iter()
            .filter(|f| **f >= 6.0 / n as f64 && **f < 10.0 / n as f64)
            .count();
        let expected = (4.0 * (1.0 + floor)) / (4.0 + n as f64 * floor) / 4.0 * 4.0;
        let frac = inside as f64 / 10_000.0;
        assert!(frac >= 0.8, "only {frac} of samples inside the slab");
        assert!((frac - expected).abs() < 0.05);
    }

    #[test]
    fn opaque_sample_renders_its_own_color_and_depth() {
        let fwd = render_forward(
            &[2.0],
            &[1e9],
            &[[0.2, 0.5, 0.7]],
            &[Some(Vector3::new(0.0, 0.0, -1.0))],
            1.0,
        );
        assert_relative_eq!(fwd.color[0], 0.2, epsilon = 1e-12);
        assert_relative_eq!(fwd.color[2], 0.7, epsilon = 1e-12);
        assert_relative_eq!(fwd.depth, 2.0, epsilon = 1e-9);
        assert_relative_eq!(fwd.opacity, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_space_renders_zero_opacity() {
        let fwd = render_forward(
            &[0.5, 1.0, 1.5],
            &[0.0, 0.0, 0.0],
            &[[1.0; 3]; 3],
            &[None, None, None],
            0.5,
        );
        assert_eq!(fwd.opacity, 0.0);
        assert!(fwd.transmittances.iter().all(|t| *t == 1.0));
        assert_eq!(fwd.color, [0.0; 3]);
    }

    #[test]
    fn empty_sample_list_is_not_an_error() {
        let fwd = render_forward(&[], &[], &[], &[], 1.0);
        assert_eq!(fwd.opacity, 0.0);
        assert_eq!(fwd.weights.len(), 0);
    }

    #[test]
    fn two_sample_transmittance_matches_closed_form() {
        // rho0 * d0 = ln 2 gives w0 = 0.5 and T1 = 0.5.
        let d0 = 0.25;
        let rho0 = std::f64::consts::LN_2 / d0;
        let fwd = render_forward(
            &[1.0, 1.25],
            &[rho0, 3.0],
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            &[None, None],
            0.5,
        );
        assert_relative_eq!(fwd.weights[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(fwd.transmittances[1], 0.5, epsilon = 1e-12);
        // Direct evaluation of the transmittance formula as an oracle.
        let t1 = (-rho0 * d0).exp();
        assert_relative_eq!(fwd.transmittances[1], t1, epsilon = 1e-15);
        let w1 = t1 * (1.0 - (-3.0_f64 * 0.5).exp());
        assert_relative_eq!(fwd.weights[1], w1, epsilon = 1e-15);
    }

    #[test]
    fn energy_is_conserved_and_transmittance_monotone() {
        let mut rng = StdRng::seed_from_u64(4);
        use rand::Rng;
        for _ in 0..200 {
            let n = rng.random_range(1..20);
            let mut distances: Vec<f64> =
                (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
            distances.sort_by(|a, b| a.total_cmp(b));
            distances.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            let m = distances.len();
            let densities: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..8.0)).collect();
            let colors = vec![[0.5; 3]; m];
            let normals = vec![None; m];
            let fwd = render_forward(&distances, &densities, &colors, &normals, 0.3);
            // sum w + T_final = 1 exactly (final transmittance after the
            // last sample).
            let t_final = fwd.transmittances.last().unwrap() * (1.0 - fwd.alphas.last().unwrap());
            assert!(
                (fwd.opacity + t_final - 1.0).abs() < 1e-6,
                "energy violation: {}",
                fwd.opacity + t_final - 1.0
            );
            for w in fwd.transmittances.windows(2) {
                assert!(w[1] <= w[0] + 1e-15);
            }
            assert!(fwd.weights.iter().all(|w| *w >= 0.0));
            assert!(fwd.opacity <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn render_backward_matches_finite_differences() {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(5);
        for trial in 0..20 {
            let n = rng.random_range(2..8);
            let mut distances: Vec<f64> =
                (0..n).map(|_| rng.random_range(0.1..4.0)).collect();
            distances.sort_by(|a, b| a.total_cmp(b));
            distances.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
            let m = distances.len();
            let densities: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..4.0)).collect();
            let colors: Vec<[f64; 3]> = (0..m)
                .map(|_| {
                    [
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                    ]
                })
                .collect();
            let normals: Vec<Option<Vector3<f64>>> = (0..m)
                .map(|_| {
                    Some(
                        Vector3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        )
                        .normalize(),
                    )
                })
                .collect();

            // Random linear functional over every rendered quantity.
            let wc = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let wd: f64 = rng.random_range(-1.0..1.0);
            let wn = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let wo: f64 = rng.random_range(-1.0..1.0);
            let ww: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wt: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();

            let eval = |densities: &[f64], colors: &[[f64; 3]]| -> f64 {
                let fwd = render_forward(distances.as_slice(), densities, colors, &normals, 0.4);
                let mut total = wd * fwd.depth + wo * fwd.opacity + wn.dot(&fwd.normal);
                for c in 0..3 {
                    total += wc[c] * fwd.color[c];
                }
                for t in 0..fwd.weights.len() {
                    total += ww[t] * fwd.weights[t] + wt[t] * fwd.transmittances[t];
                }
                total
            };

            let fwd = render_forward(&distances, &densities, &colors, &normals, 0.4);
            let cot = RenderCotangents {
                color: wc,
                depth: wd,
                normal: wn,
                opacity: wo,
                weights: ww.clone(),
                transmittances: wt.clone(),
            };
            let sample_cot = render_backward(&fwd, &colors, &normals, &cot);

            let step = 1e-6;
            for t in 0..m {
                let mut dp = densities.clone();
                dp[t] += step;
                let mut dm = densities.clone();
                dm[t] -= step;
                let fd = (eval(&dp, &colors) - eval(&dm, &colors)) / (2.0 * step);
                let scale = fd.abs().max(1.0);
                assert!(
                    (sample_cot.density[t] - fd).abs() / scale < 1e-5,
                    "trial {trial} density {t}: {} vs {fd}",
                    sample_cot.density[t]
                );

                for c in 0..3 {
                    let mut cp = colors.clone();
                    cp[t][c] += step;
                    let mut cm = colors.clone();
                    cm[t][c] -= step;
                    let fd = (eval(&densities, &cp) - eval(&densities, &cm)) / (2.0 * step);
                    assert!(
                        (sample_cot.color[t][c] - fd).abs() < 1e-6,
                        "trial {trial} color {t}.{c}"
                    );
                }
            }
        }
    }
}
