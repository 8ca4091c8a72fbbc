//! Dense geometry enhancement: dense-to-sparse depth scale alignment.
//!
//! A [`PriorProvider`] turns a keyframe image into an up-to-scale dense depth
//! map plus surface normals. The depth map is mapped onto the tracker's
//! sparse patch depths with an affine `scale * depth + shift`, where the
//! coefficients come from one of five strategies. Normals are scale-free and
//! pass through unchanged.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::FrameId;
use crate::raster::{DepthMap, ImageRgb, NormalMap};
use crate::tracker::SecuredKeyframe;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("need at least 2 usable sparse samples, got {0}")]
    InsufficientData(usize),
    #[error("sparse sample at ({0}, {1}) outside the dense map")]
    SampleOutOfBounds(f64, f64),
    #[error("non-positive sparse depth {0}")]
    NonPositiveDepth(f64),
    #[error("degenerate dense-depth distribution (zero spread) for strategy {0:?}")]
    DegenerateDistribution(AlignmentStrategy),
}

/// Raised by prior providers; the keyframe is forwarded rgb-only.
#[derive(Debug, Error)]
#[error("prior provider failed: {0}")]
pub struct PriorError(pub String);

/// Contract for the module that predicts an up-to-scale dense depth map and
/// surface normals from a single RGB keyframe (a monocular network in
/// production, an analytic oracle in tests).
pub trait PriorProvider: Send {
    fn infer(&mut self, frame: FrameId, image: &ImageRgb) -> Result<(DepthMap, NormalMap), PriorError>;
}

/// Sparse anchor depths extracted from a secured keyframe's patches.
#[derive(Clone, Debug)]
pub struct SparseDepthSet {
    samples: Vec<(Vector2<f64>, f64)>,
}

impl SparseDepthSet {
    pub fn new(
        samples: Vec<(Vector2<f64>, f64)>,
        width: usize,
        height: usize,
    ) -> Result<Self, AlignError> {
        for (pixel, depth) in &samples {
            if *depth <= 0.0 || !depth.is_finite() {
                return Err(AlignError::NonPositiveDepth(*depth));
            }
            if pixel.x < 0.0
                || pixel.y < 0.0
                || pixel.x > width as f64 - 1.0
                || pixel.y > height as f64 - 1.0
            {
                return Err(AlignError::SampleOutOfBounds(pixel.x, pixel.y));
            }
        }
        if samples.len() < 2 {
            return Err(AlignError::InsufficientData(samples.len()));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[(Vector2<f64>, f64)] {
        &self.samples
    }
}

/// The five linear alignment strategies from the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentStrategy {
    /// Match mean/spread of sparse depths against the sparsified dense map,
    /// with the shift anchored at the full-map mean.
    Ours,
    /// Like `Ours` but with the shift computed from sparsified statistics
    /// only.
    Relaxed,
    /// Closed-form least squares on the paired samples.
    LeastSquares,
    /// Map the sparsified dense range onto the sparse range.
    MinMax,
    /// Identity (scale 1, shift 0).
    None,
}

impl AlignmentStrategy {
    pub const ALL: [AlignmentStrategy; 5] = [
        AlignmentStrategy::None,
        AlignmentStrategy::MinMax,
        AlignmentStrategy::LeastSquares,
        AlignmentStrategy::Relaxed,
        AlignmentStrategy::Ours,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AlignmentStrategy::Ours => "ours",
            AlignmentStrategy::Relaxed => "relaxed",
            AlignmentStrategy::LeastSquares => "least-squares",
            AlignmentStrategy::MinMax => "min-max",
            AlignmentStrategy::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AlignConfig {
    /// Sparse samples farther than this many MADs from the sparse median are
    /// excluded before fitting.
    pub outlier_mad_factor: f64,
    /// Aligned depths are clamped to at least this value.
    pub depth_floor: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            outlier_mad_factor: 5.0,
            depth_floor: 1e-3,
        }
    }
}

/// Result of aligning one dense depth map.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub aligned: DepthMap,
    pub scale: f64,
    pub shift: f64,
    /// Number of pixels clamped to the depth floor.
    pub clamped: usize,
    /// Set when the requested strategy was replaced (least-squares with a
    /// non-positive scale falls back to `Ours`).
    pub fallback_from: Option<AlignmentStrategy>,
}

/// Dense-map values at the sparse sample coordinates (nearest pixel).
/// Samples landing on invalid dense pixels are dropped.
pub fn sparsify_dense(dense: &DepthMap, sparse: &SparseDepthSet) -> Result<Vec<f64>, AlignError> {
    let values: Vec<f64> = paired_samples(dense, sparse).into_iter().map(|(_, d)| d).collect();
    if values.len() < 2 {
        return Err(AlignError::InsufficientData(values.len()));
    }
    Ok(values)
}

/// Paired `(sparse depth, dense depth at the same pixel)` samples.
fn paired_samples(dense: &DepthMap, sparse: &SparseDepthSet) -> Vec<(f64, f64)> {
    sparse
        .samples
        .iter()
        .filter_map(|(pixel, depth)| {
            let u = (pixel.x.round() as usize).min(dense.width - 1);
            let v = (pixel.y.round() as usize).min(dense.height - 1);
            dense.get(u, v).map(|d| (*depth, d))
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for v in values {
        sum += v;
        count += 1;
    }
    (if count > 0 { sum / count as f64 } else { 0.0 }, count)
}

/// Population standard deviation (divide by n).
fn std_dev(values: &[f64], mean: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64).sqrt()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values[values.len() / 2]
}

/// Drops paired samples whose sparse depth lies beyond `factor` MADs from the
/// sparse median.
fn reject_outliers(pairs: &[(f64, f64)], factor: f64) -> Vec<(f64, f64)> {
    let mut depths: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
    let med = median(&mut depths);
    let mut deviations: Vec<f64> = pairs.iter().map(|(s, _)| (s - med).abs()).collect();
    let mad = median(&mut deviations);
    pairs
        .iter()
        .copied()
        .filter(|(s, _)| (s - med).abs() <= factor * mad.max(f64::EPSILON))
        .collect()
}

/// Computes the affine alignment `scale * dense + shift` for the chosen
/// strategy and applies it to the dense map.
pub fn align_depth(
    dense: &DepthMap,
    sparse: &SparseDepthSet,
    strategy: AlignmentStrategy,
    cfg: &AlignConfig,
) -> Result<Alignment, AlignError> {
    let (scale, shift, fallback_from) = if strategy == AlignmentStrategy::None {
        (1.0, 0.0, None)
    } else {
        let raw_pairs = paired_samples(dense, sparse);
        let pairs = reject_outliers(&raw_pairs, cfg.outlier_mad_factor);
        if pairs.len() < 2 {
            return Err(AlignError::InsufficientData(pairs.len()));
        }
        solve_alignment(dense, &pairs, strategy)?
    };
    let (aligned, clamped) = dense.affine_mapped(scale, shift, cfg.depth_floor);
    Ok(Alignment {
        aligned,
        scale,
        shift,
        clamped,
        fallback_from,
    })
}

fn solve_alignment(
    dense: &DepthMap,
    pairs: &[(f64, f64)],
    strategy: AlignmentStrategy,
) -> Result<(f64, f64, Option<AlignmentStrategy>), AlignError> {
    let sparse_vals: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
    let dense_vals: Vec<f64> = pairs.iter().map(|(_, d)| *d).collect();
    let (sparse_mean, _) = mean(sparse_vals.iter().copied());
    let (sampled_mean, _) = mean(dense_vals.iter().copied());
    let sparse_std = std_dev(&sparse_vals, sparse_mean);
    let sampled_std = std_dev(&dense_vals, sampled_mean);

    match strategy {
        AlignmentStrategy::Ours => {
            if sampled_std <= 0.0 {
                return Err(AlignError::DegenerateDistribution(strategy));
            }
            let scale = sparse_std / sampled_std;
            let (full_mean, _) = mean(dense.valid_values());
            let shift = full_mean * (sparse_mean / sampled_mean - scale);
            Ok((scale, shift, None))
        }
        AlignmentStrategy::Relaxed => {
            if sampled_std <= 0.0 {
                return Err(AlignError::DegenerateDistribution(strategy));
            }
            let scale = sparse_std / sampled_std;
            let shift = sparse_mean - scale * sampled_mean;
            Ok((scale, shift, None))
        }
        AlignmentStrategy::LeastSquares => {
            let var: f64 = dense_vals
                .iter()
                .map(|d| (d - sampled_mean) * (d - sampled_mean))
                .sum();
            if var <= 0.0 {
                return Err(AlignError::DegenerateDistribution(strategy));
            }
            let cov: f64 = pairs
                .iter()
                .map(|(s, d)| (d - sampled_mean) * (s - sparse_mean))
                .sum();
            let scale = cov / var;
            if scale <= 0.0 {
                eprintln!(
                    "warning: least-squares alignment produced scale {scale}; falling back"
                );
                let (s, b, _) = solve_alignment(dense, pairs, AlignmentStrategy::Ours)?;
                return Ok((s, b, Some(AlignmentStrategy::LeastSquares)));
            }
            let shift = sparse_mean - scale * sampled_mean;
            Ok((scale, shift, None))
        }
        AlignmentStrategy::MinMax => {
            let (dense_min, dense_max) = min_max(&dense_vals);
            let (sparse_min, sparse_max) = min_max(&sparse_vals);
            if dense_max - dense_min <= 0.0 {
                return Err(AlignError::DegenerateDistribution(strategy));
            }
            let scale = (sparse_max - sparse_min) / (dense_max - dense_min);
            let shift = sparse_min - scale * dense_min;
            Ok((scale, shift, None))
        }
        AlignmentStrategy::None => Ok((1.0, 0.0, None)),
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Aligned priors attached to a keyframe.
#[derive(Clone, Debug)]
pub struct KeyframePriors {
    pub depth: DepthMap,
    pub normals: NormalMap,
    pub scale: f64,
    pub shift: f64,
}

/// A secured keyframe after the enhancement stage. `priors` is `None` for
/// rgb-only keyframes (provider failure or degenerate alignment); mapping
/// then falls back to the color loss alone for this keyframe.
#[derive(Clone, Debug)]
pub struct EnhancedKeyframe {
    pub keyframe: SecuredKeyframe,
    pub priors: Option<KeyframePriors>,
}

impl EnhancedKeyframe {
    pub fn rgb_only(&self) -> bool {
        self.priors.is_none()
    }
}

/// Runs the provider once on the keyframe image and aligns the predicted
/// depth to the keyframe's sparse patch depths. Failures degrade the
/// keyframe to rgb-only instead of stopping the pipeline.
pub fn enhance_keyframe(
    keyframe: SecuredKeyframe,
    provider: &mut dyn PriorProvider,
    strategy: AlignmentStrategy,
    cfg: &AlignConfig,
) -> EnhancedKeyframe {
    let (width, height) = (keyframe.image.width, keyframe.image.height);
    let inferred = provider.infer(keyframe.frame_id, &keyframe.image);
    let priors = match inferred {
        Ok((depth, normals)) => {
            let sparse = SparseDepthSet::new(keyframe.sparse_depths.clone(), width, height);
            match sparse.and_then(|s| align_depth(&depth, &s, strategy, cfg)) {
                Ok(alignment) => Some(KeyframePriors {
                    depth: alignment.aligned,
                    normals,
                    scale: alignment.scale,
                    shift: alignment.shift,
                }),
                Err(err) => {
                    eprintln!(
                        "warning: keyframe {} forwarded rgb-only: {err}",
                        keyframe.frame_id
                    );
                    None
                }
            }
        }
        Err(err) => {
            eprintln!(
                "warning: keyframe {} forwarded rgb-only: {err}",
                keyframe.frame_id
            );
            None
        }
    };
    EnhancedKeyframe { keyframe, priors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn grid_sparse(depth: &DepthMap, map: impl Fn(f64) -> f64) -> SparseDepthSet {
        // Full-coverage sparse set: one sample per valid dense pixel.
        let mut samples = Vec::new();
        for v in 0..depth.height {
            for u in 0..depth.width {
                if let Some(d) = depth.get(u, v) {
                    samples.push((Vector2::new(u as f64, v as f64), map(d)));
                }
            }
        }
        SparseDepthSet::new(samples, depth.width, depth.height).unwrap()
    }

    fn smooth_depth(width: usize, height: usize) -> DepthMap {
        DepthMap::from_fn(width, height, |u, v| {
            2.0 + (u as f64 * 0.37).sin() + 0.5 * (v as f64 * 0.23).cos()
        })
    }

    #[test]
    fn sparsify_constant_map_returns_constant_samples() {
        let dense = DepthMap::from_fn(8, 6, |_, _| 2.0);
        let sparse = SparseDepthSet::new(
            vec![
                (Vector2::new(1.0, 2.0), 1.0),
                (Vector2::new(5.0, 3.0), 1.5),
                (Vector2::new(7.0, 5.0), 0.7),
            ],
            8,
            6,
        )
        .unwrap();
        let values = sparsify_dense(&dense, &sparse).unwrap();
        assert_eq!(values, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn sparsify_full_coverage_is_the_flattened_raster() {
        let dense = smooth_depth(6, 4);
        let sparse = grid_sparse(&dense, |d| d);
        let values = sparsify_dense(&dense, &sparse).unwrap();
        let expected: Vec<f64> = dense.valid_values().collect();
        assert_eq!(values, expected);
    }

    #[test]
    fn sparsify_matches_index_oracle_and_drops_invalid() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut dense = smooth_depth(16, 12);
        dense.invalidate(3, 3);
        let mut samples = Vec::new();
        for _ in 0..50 {
            let u = rng.random_range(0..16usize);
            let v = rng.random_range(0..12usize);
            samples.push((Vector2::new(u as f64, v as f64), rng.random_range(0.5..3.0)));
        }
        let sparse = SparseDepthSet::new(samples.clone(), 16, 12).unwrap();
        let values = sparsify_dense(&dense, &sparse).unwrap();
        let oracle: Vec<f64> = samples
            .iter()
            .filter_map(|(p, _)| dense.get(p.x as usize, p.y as usize))
            .collect();
        assert_eq!(values, oracle);
    }

    #[test]
    fn insufficient_samples_is_an_error() {
        let dense = DepthMap::from_fn(4, 4, |_, _| 1.0);
        assert!(matches!(
            SparseDepthSet::new(vec![(Vector2::new(0.0, 0.0), 1.0)], 4, 4),
            Err(AlignError::InsufficientData(1))
        ));
        // Two samples, but one lands on an invalidated pixel.
        let mut holed = dense.clone();
        holed.invalidate(0, 0);
        let sparse = SparseDepthSet::new(
            vec![(Vector2::new(0.0, 0.0), 1.0), (Vector2::new(1.0, 1.0), 1.0)],
            4,
            4,
        )
        .unwrap();
        assert!(matches!(
            sparsify_dense(&holed, &sparse),
            Err(AlignError::InsufficientData(1))
        ));
    }

    #[test]
    fn identical_statistics_give_identity_alignment() {
        let dense = smooth_depth(10, 8);
        let sparse = grid_sparse(&dense, |d| d);
        let alignment = align_depth(&dense, &sparse, AlignmentStrategy::Ours, &AlignConfig::default())
            .unwrap();
        assert!((alignment.scale - 1.0).abs() < 1e-12);
        assert!(alignment.shift.abs() < 1e-9);
    }

    #[test]
    fn constant_offset_is_recovered_exactly_under_full_coverage() {
        // dense = truth + c with full-coverage sampling: scale 1, shift -c.
        let truth = smooth_depth(10, 8);
        let c = 0.75;
        let dense = DepthMap::from_fn(10, 8, |u, v| truth.get(u, v).unwrap() + c);
        let sparse = grid_sparse(&truth, |d| d);
        let alignment = align_depth(&dense, &sparse, AlignmentStrategy::Ours, &AlignConfig::default())
            .unwrap();
        assert!((alignment.scale - 1.0).abs() < 1e-9);
        assert!((alignment.shift + c).abs() < 1e-9);
        for v in 0..8 {
            for u in 0..10 {
                let got = alignment.aligned.get(u, v).unwrap();
                assert!((got - truth.get(u, v).unwrap()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn affine_skew_recovery() {
        // dense = 0.7 * truth + 0.3; the fitted scale must be 1/0.7 for any
        // sampling; the aligned map matches truth exactly under full
        // coverage (where the full-map mean equals the sampled mean).
        let truth = smooth_depth(16, 12);
        let dense = DepthMap::from_fn(16, 12, |u, v| 0.7 * truth.get(u, v).unwrap() + 0.3);

        let full = grid_sparse(&truth, |d| d);
        let alignment =
            align_depth(&dense, &full, AlignmentStrategy::Ours, &AlignConfig::default()).unwrap();
        assert!(
            (alignment.scale - 1.0 / 0.7).abs() < 1e-6,
            "scale {}",
            alignment.scale
        );
        let mut sse = 0.0;
        let mut n = 0;
        for v in 0..12 {
            for u in 0..16 {
                let err = alignment.aligned.get(u, v).unwrap() - truth.get(u, v).unwrap();
                sse += err * err;
                n += 1;
            }
        }
        assert!((sse / n as f64).sqrt() < 1e-6);

        // 96 random sparse samples: scale still exact; the explicit-formula
        // oracle must agree with the implementation.
        let mut rng = StdRng::seed_from_u64(8);
        let samples: Vec<(Vector2<f64>, f64)> = (0..96)
            .map(|_| {
                let u = rng.random_range(0..16usize);
                let v = rng.random_range(0..12usize);
                (
                    Vector2::new(u as f64, v as f64),
                    truth.get(u, v).unwrap(),
                )
            })
            .collect();
        let sparse = SparseDepthSet::new(samples.clone(), 16, 12).unwrap();
        let got = align_depth(&dense, &sparse, AlignmentStrategy::Ours, &AlignConfig::default())
            .unwrap();
        assert!((got.scale - 1.0 / 0.7).abs() < 1e-6);

        // Independent oracle for the statistics-based formulas.
        let sparse_vals: Vec<f64> = samples.iter().map(|(_, d)| *d).collect();
        let dense_vals: Vec<f64> = samples
            .iter()
            .map(|(p, _)| dense.get(p.x as usize, p.y as usize).unwrap())
            .collect();
        let n = sparse_vals.len() as f64;
        let mu_s = sparse_vals.iter().sum::<f64>() / n;
        let mu_hat = dense_vals.iter().sum::<f64>() / n;
        let sd_s =
            (sparse_vals.iter().map(|v| (v - mu_s).powi(2)).sum::<f64>() / n).sqrt();
        let sd_hat =
            (dense_vals.iter().map(|v| (v - mu_hat).powi(2)).sum::<f64>() / n).sqrt();
        let mu_full = {
            let vals: Vec<f64> = dense.valid_values().collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let expected_scale = sd_s / sd_hat;
        let expected_shift = mu_full * (mu_s / mu_hat - expected_scale);
        assert!((got.scale - expected_scale).abs() < 1e-12);
        assert!((got.shift - expected_shift).abs() < 1e-12);

        // The relaxed variant recovers the skew exactly even under partial
        // sampling (its shift uses sampled statistics only).
        let relaxed =
            align_depth(&dense, &sparse, AlignmentStrategy::Relaxed, &AlignConfig::default())
                .unwrap();
        assert!((relaxed.scale - 1.0 / 0.7).abs() < 1e-9);
        assert!((relaxed.shift + 0.3 / 0.7).abs() < 1e-9);
    }

    #[test]
    fn ours_is_invariant_to_affine_skew_of_the_dense_input() {
        let truth = smooth_depth(12, 9);
        let sparse = grid_sparse(&truth, |d| d);
        let base = align_depth(&truth, &sparse, AlignmentStrategy::Ours, &AlignConfig::default())
            .unwrap();
        for (a, b) in [(2.0, 0.4), (0.5, -0.2), (1.7, 0.0)] {
            let skewed = DepthMap::from_fn(12, 9, |u, v| a * truth.get(u, v).unwrap() + b);
            let got =
                align_depth(&skewed, &sparse, AlignmentStrategy::Ours, &AlignConfig::default())
                    .unwrap();
            for v in 0..9 {
                for u in 0..12 {
                    let lhs = got.aligned.get(u, v).unwrap();
                    let rhs = base.aligned.get(u, v).unwrap();
                    assert!((lhs - rhs).abs() < 1e-9, "skew ({a},{b}) at ({u},{v})");
                }
            }
        }
    }

    #[test]
    fn least_squares_is_a_global_minimum() {
        let mut rng = StdRng::seed_from_u64(10);
        let truth = smooth_depth(14, 10);
        let dense = DepthMap::from_fn(14, 10, |u, v| 1.4 * truth.get(u, v).unwrap() - 0.2);
        let samples: Vec<(Vector2<f64>, f64)> = (0..60)
            .map(|_| {
                let u = rng.random_range(0..14usize);
                let v = rng.random_range(0..10usize);
                (
                    Vector2::new(u as f64, v as f64),
                    truth.get(u, v).unwrap() * (1.0 + rng.random_range(-0.02..0.02)),
                )
            })
            .collect();
        let sparse = SparseDepthSet::new(samples.clone(), 14, 10).unwrap();
        let fit = align_depth(
            &dense,
            &sparse,
            AlignmentStrategy::LeastSquares,
            &AlignConfig::default(),
        )
        .unwrap();
        let residual = |scale: f64, shift: f64| -> f64 {
            samples
                .iter()
                .map(|(p, s)| {
                    let d = dense.get(p.x as usize, p.y as usize).unwrap();
                    (scale * d + shift - s).powi(2)
                })
                .sum()
        };
        let best = residual(fit.scale, fit.shift);
        for (da, db) in [
            (1e-3, 0.0),
            (-1e-3, 0.0),
            (0.0, 1e-3),
            (0.0, -1e-3),
            (1e-3, 1e-3),
            (-1e-3, -1e-3),
            (1e-3, -1e-3),
            (-1e-3, 1e-3),
        ] {
            assert!(residual(fit.scale + da, fit.shift + db) >= best);
        }
    }

    #[test]
    fn min_max_maps_extremes_exactly() {
        let truth = smooth_depth(10, 10);
        let dense = DepthMap::from_fn(10, 10, |u, v| 0.6 * truth.get(u, v).unwrap() + 0.9);
        let sparse = grid_sparse(&truth, |d| d);
        let fit = align_depth(&dense, &sparse, AlignmentStrategy::MinMax, &AlignConfig::default())
            .unwrap();
        let dense_vals: Vec<f64> = dense.valid_values().collect();
        let sparse_vals: Vec<f64> = sparse.samples().iter().map(|(_, d)| *d).collect();
        let (dmin, dmax) = min_max(&dense_vals);
        let (smin, smax) = min_max(&sparse_vals);
        assert!((fit.scale * dmin + fit.shift - smin).abs() < 1e-12);
        assert!((fit.scale * dmax + fit.shift - smax).abs() < 1e-12);
    }

    #[test]
    fn constant_dense_samples_are_degenerate() {
        let dense = DepthMap::from_fn(6, 6, |_, _| 2.5);
        let sparse = SparseDepthSet::new(
            vec![
                (Vector2::new(0.0, 0.0), 1.0),
                (Vector2::new(2.0, 2.0), 2.0),
                (Vector2::new(4.0, 4.0), 3.0),
            ],
            6,
            6,
        )
        .unwrap();
        for strategy in [AlignmentStrategy::Ours, AlignmentStrategy::Relaxed] {
            assert!(matches!(
                align_depth(&dense, &sparse, strategy, &AlignConfig::default()),
                Err(AlignError::DegenerateDistribution(_))
            ));
        }
    }

    #[test]
    fn outlier_samples_are_rejected_before_fitting() {
        let truth = smooth_depth(12, 10);
        let dense = DepthMap::from_fn(12, 10, |u, v| 0.8 * truth.get(u, v).unwrap());
        let mut samples: Vec<(Vector2<f64>, f64)> = (0..40)
            .map(|k| {
                let u = (k * 7) % 12;
                let v = (k * 3) % 10;
                (Vector2::new(u as f64, v as f64), truth.get(u, v).unwrap())
            })
            .collect();
        // One wildly wrong anchor depth.
        samples.push((Vector2::new(5.0, 5.0), 500.0));
        let sparse = SparseDepthSet::new(samples, 12, 10).unwrap();
        let fit = align_depth(&dense, &sparse, AlignmentStrategy::Ours, &AlignConfig::default())
            .unwrap();
        assert!(
            (fit.scale - 1.0 / 0.8).abs() < 1e-6,
            "outlier leaked into the fit: scale {}",
            fit.scale
        );
    }

    #[test]
    fn noisy_benchmark_alignment_beats_no_alignment() {
        // Affine skew plus 2% multiplicative noise on the dense map, sparse
        // anchors noiseless. Statistics-based and least-squares alignment
        // are near-ties on aligned-map RMSE (least squares is the empirical
        // risk minimizer of that functional); both must beat the identity
        // strategy in every seed.
        let truth = smooth_depth(24, 18);
        let mut wins = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = rng.random_range(0.5..2.0);
            let b = rng.random_range(-0.5..0.5);
            let dense = DepthMap::from_fn(24, 18, |u, v| {
                let noise = 1.0
                    + 0.02
                        * {
                            let u1: f64 = rng.random_range(1e-12..1.0);
                            let u2: f64 = rng.random_range(0.0..1.0);
                            (-2.0 * u1.ln()).sqrt()
                                * (2.0 * std::f64::consts::PI * u2).cos()
                        };
                ((a * truth.get(u, v).unwrap() + b) * noise).max(0.01)
            });
            let samples: Vec<(Vector2<f64>, f64)> = (0..96)
                .map(|_| {
                    let u = rng.random_range(0..24usize);
                    let v = rng.random_range(0..18usize);
                    (Vector2::new(u as f64, v as f64), truth.get(u, v).unwrap())
                })
                .collect();
            let sparse = SparseDepthSet::new(samples, 24, 18).unwrap();
            let rmse = |strategy| {
                let fit = align_depth(&dense, &sparse, strategy, &AlignConfig::default()).unwrap();
                let mut sse = 0.0;
                let mut n = 0;
                for v in 0..18 {
                    for u in 0..24 {
                        let err =
                            fit.aligned.get(u, v).unwrap() - truth.get(u, v).unwrap();
                        sse += err * err;
                        n += 1;
                    }
                }
                (sse / n as f64).sqrt()
            };
            let ours = rmse(AlignmentStrategy::Ours);
            let ls = rmse(AlignmentStrategy::LeastSquares);
            let none = rmse(AlignmentStrategy::None);
            if ours <= none && ls <= none {
                wins += 1;
            }
        }
        assert_eq!(wins, seeds, "alignment lost to identity in {}/{seeds} seeds", seeds - wins);
    }
}
