//! Oracle providers backed by the analytic scene.
//!
//! These stand in for the learned networks behind the provider contracts:
//! the flow oracle produces reprojection corrections from ground-truth
//! geometry, and the prior oracle produces dense depth/normal maps as a
//! configurable affine skew plus noise on the ground truth. All outputs are
//! deterministic under a fixed seed regardless of call order (per-frame and
//! per-edge substreams are derived by hashing identifiers into the seed).

use nalgebra::{Vector2, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::enhance::{PriorError, PriorProvider};
use crate::geometry::{project, unproject, FrameId, Intrinsics, Pose};
use crate::raster::{DepthMap, ImageRgb, NormalMap};
use crate::tracker::{CorrespondenceProvider, EdgeTarget, GraphView, ProviderError};

use super::{render_groundtruth, SceneSpec};

/// Noise model applied on top of ground truth by the oracles.
#[derive(Clone, Copy, Debug)]
pub struct OracleNoise {
    /// Std-dev of Gaussian pixel noise on flow targets.
    pub pixel_sigma: f64,
    /// Affine depth skew: reported depth = scale * gt + shift.
    pub depth_scale: f64,
    pub depth_shift: f64,
    /// Multiplicative depth noise std-dev (fraction).
    pub depth_noise: f64,
    /// Angular normal noise std-dev in radians.
    pub normal_sigma: f64,
    pub seed: u64,
}

impl OracleNoise {
    pub fn noiseless() -> Self {
        Self {
            pixel_sigma: 0.0,
            depth_scale: 1.0,
            depth_shift: 0.0,
            depth_noise: 0.0,
            normal_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.pixel_sigma < 0.0 || self.depth_noise < 0.0 || self.normal_sigma < 0.0 {
            return Err("noise std-devs must be >= 0".into());
        }
        if self.depth_scale <= 0.0 {
            return Err("depth scale must be > 0".into());
        }
        Ok(())
    }
}

fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    }
    h
}

fn gaussian(rng: &mut StdRng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Source of ground-truth poses keyed by frame id.
pub trait GroundTruthPoses: Send {
    fn pose(&self, frame: FrameId) -> Option<Pose>;
}

/// Ground truth from a scene trajectory where frame ids equal path indices.
#[derive(Clone)]
pub struct TrajectoryPoses {
    poses: Vec<Pose>,
}

impl TrajectoryPoses {
    pub fn from_scene(scene: &SceneSpec) -> Self {
        Self {
            poses: (0..scene.trajectory.frame_count())
                .map(|k| scene.trajectory.pose(k))
                .collect(),
        }
    }

    pub fn from_poses(poses: Vec<Pose>) -> Self {
        Self { poses }
    }
}

impl GroundTruthPoses for TrajectoryPoses {
    fn pose(&self, frame: FrameId) -> Option<Pose> {
        self.poses.get(frame.0 as usize).copied()
    }
}

/// Correspondence oracle: for every edge, the correction moves the current
/// reprojection onto the ground-truth reprojection (plus pixel noise), and
/// the confidence is `1 / (sigma^2 + eps)` per axis. Occluded or out-of-view
/// targets get zero confidence.
pub struct FlowOracle {
    scene: SceneSpec,
    gt: TrajectoryPoses,
    noise: OracleNoise,
    /// Depth agreement tolerance for the occlusion check.
    pub occlusion_tolerance: f64,
}

impl FlowOracle {
    pub fn new(scene: SceneSpec, gt: TrajectoryPoses, noise: OracleNoise) -> Self {
        Self {
            scene,
            gt,
            noise,
            occlusion_tolerance: 1e-6,
        }
    }

    pub fn confidence(&self) -> f64 {
        1.0 / (self.noise.pixel_sigma * self.noise.pixel_sigma + 1e-12)
    }
}

impl CorrespondenceProvider for FlowOracle {
    fn predict(&mut self, view: &GraphView<'_>) -> Result<Vec<EdgeTarget>, ProviderError> {
        let intr = view.intrinsics;
        let confidence = self.confidence();
        let mut out = Vec::with_capacity(view.edges.len());
        for edge in &view.edges {
            let zero = EdgeTarget {
                correction: Vector2::zeros(),
                confidence: Vector2::zeros(),
            };
            let (Some(pose_i), Some(pose_j)) =
                (self.gt.pose(edge.patch_frame), self.gt.pose(edge.target_frame))
            else {
                return Err(ProviderError(format!(
                    "no ground-truth pose for frame {} or {}",
                    edge.patch_frame, edge.target_frame
                )));
            };
            // Ground-truth depth at the patch center in the source frame.
            let Some(gt_depth) = self.scene.depth_at(&pose_i, intr, &edge.center) else {
                out.push(zero);
                continue;
            };
            let Ok(point_i) = unproject(&edge.center, 1.0 / gt_depth, intr) else {
                out.push(zero);
                continue;
            };
            let point_world = pose_i.inverse().transform_point(&point_i);
            let point_j = pose_j.transform_point(&point_world);
            if point_j.z <= 0.0 {
                out.push(zero);
                continue;
            }
            let Ok(gt_pixel) = project(&point_j, intr) else {
                out.push(zero);
                continue;
            };
            if !intr.contains(&gt_pixel) {
                out.push(zero);
                continue;
            }
            // Occlusion: the point must be the first surface seen from j.
            if !self
                .scene
                .is_visible(&pose_j, intr, &point_world, self.occlusion_tolerance)
            {
                out.push(zero);
                continue;
            }
            let Some(current) = edge.current_reprojection else {
                out.push(zero);
                continue;
            };
            let mut rng = StdRng::seed_from_u64(mix_seed(
                self.noise.seed,
                &[edge.patch_frame.0, edge.patch_index_in_frame as u64, edge.target_frame.0],
            ));
            let noisy = gt_pixel
                + Vector2::new(
                    gaussian(&mut rng, self.noise.pixel_sigma),
                    gaussian(&mut rng, self.noise.pixel_sigma),
                );
            out.push(EdgeTarget {
                correction: noisy - current,
                confidence: Vector2::new(confidence, confidence),
            });
        }
        Ok(out)
    }
}

/// Monocular-prior oracle: ground-truth depth under an affine skew with
/// multiplicative noise, and ground-truth normals under small random
/// rotations.
pub struct PriorOracle {
    scene: SceneSpec,
    gt: TrajectoryPoses,
    noise: OracleNoise,
    intr: Intrinsics,
}

impl PriorOracle {
    pub fn new(scene: SceneSpec, gt: TrajectoryPoses, noise: OracleNoise, intr: Intrinsics) -> Self {
        Self {
            scene,
            gt,
            noise,
            intr,
        }
    }
}

impl PriorProvider for PriorOracle {
    fn infer(&mut self, frame: FrameId, _image: &ImageRgb) -> Result<(DepthMap, NormalMap), PriorError> {
        let Some(pose) = self.gt.pose(frame) else {
            return Err(PriorError(format!("no ground-truth pose for frame {frame}")));
        };
        let gt = render_groundtruth(&self.scene, &pose, &self.intr);
        let mut rng = StdRng::seed_from_u64(mix_seed(self.noise.seed, &[frame.0, 0x5eed]));

        let mut depth = DepthMap::new_invalid(self.intr.width, self.intr.height);
        for v in 0..self.intr.height {
            for u in 0..self.intr.width {
                if gt.background[v * self.intr.width + u] {
                    continue;
                }
                let d = gt.depth.get(u, v).expect("foreground depth");
                let skewed = self.noise.depth_scale * d + self.noise.depth_shift;
                let noisy = skewed * (1.0 + gaussian(&mut rng, self.noise.depth_noise));
                depth.set(u, v, noisy.max(1e-6));
            }
        }

        let normals = NormalMap::from_fn(self.intr.width, self.intr.height, |u, v| {
            let n = gt.normals.get(u, v)?;
            if self.noise.normal_sigma == 0.0 {
                return Some(n);
            }
            let axis = loop {
                let candidate = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if candidate.norm() > 1e-6 {
                    break candidate.normalize();
                }
            };
            let angle = gaussian(&mut rng, self.noise.normal_sigma);
            let rot = nalgebra::UnitQuaternion::from_scaled_axis(axis * angle);
            Some((rot * n).normalize())
        });

        Ok((depth, normals))
    }
}

/// A provider that always fails; exercises the rgb-only fallback paths.
pub struct FailingPriorProvider;

impl PriorProvider for FailingPriorProvider {
    fn infer(&mut self, frame: FrameId, _image: &ImageRgb) -> Result<(DepthMap, NormalMap), PriorError> {
        Err(PriorError(format!("provider unavailable for frame {frame}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::box_room;
    use crate::tracker::{EdgeView, GraphFrame};
    use std::sync::Arc;

    fn intrinsics() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 48.0, 128, 96).unwrap()
    }

    fn make_view<'a>(
        frames: &'a [GraphFrame],
        intr: &'a Intrinsics,
        edges: Vec<EdgeView>,
    ) -> GraphView<'a> {
        GraphView {
            frames,
            intrinsics: intr,
            edges,
        }
    }

    #[test]
    fn zero_noise_graph_at_ground_truth_has_zero_corrections() {
        let scene = box_room(8);
        let gt = TrajectoryPoses::from_scene(&scene);
        let intr = intrinsics();
        let mut oracle = FlowOracle::new(scene.clone(), gt.clone(), OracleNoise::noiseless());

        let image = Arc::new(ImageRgb::new(intr.width, intr.height));
        let frames: Vec<GraphFrame> = (0..3u64)
            .map(|k| GraphFrame {
                id: FrameId(k),
                timestamp: k as f64,
                pose: gt.pose(FrameId(k)).unwrap(),
                image: Arc::clone(&image),
            })
            .collect();

        // A patch at the image center of frame 0 with ground-truth depth.
        let center = Vector2::new(64.0, 48.0);
        let depth = scene.depth_at(&frames[0].pose, &intr, &center).unwrap();
        let current = crate::geometry::reproject_pixel(
            &center,
            1.0 / depth,
            &frames[0].pose,
            &frames[1].pose,
            &intr,
        )
        .unwrap();
        let view = make_view(
            &frames,
            &intr,
            vec![EdgeView {
                edge_index: 0,
                patch_frame: FrameId(0),
                patch_index_in_frame: 0,
                center,
                inv_depth: 1.0 / depth,
                target_frame: FrameId(1),
                current_reprojection: Some(current),
            }],
        );
        let targets = oracle.predict(&view).unwrap();
        assert_eq!(targets.len(), 1);
        assert!(targets[0].correction.norm() < 1e-9);
        assert!(targets[0].confidence.x > 0.0);
    }

    #[test]
    fn confidence_follows_the_noise_formula() {
        let scene = box_room(8);
        let gt = TrajectoryPoses::from_scene(&scene);
        let mut noise = OracleNoise::noiseless();
        noise.pixel_sigma = 0.5;
        let oracle = FlowOracle::new(scene, gt, noise);
        assert!((oracle.confidence() - 4.0).abs() < 1e-6);
    }

    #[test]
    fn prior_oracle_with_identity_skew_returns_ground_truth() {
        let scene = box_room(8);
        let gt = TrajectoryPoses::from_scene(&scene);
        let intr = intrinsics();
        let pose = gt.pose(FrameId(0)).unwrap();
        let truth = render_groundtruth(&scene, &pose, &intr);
        let mut oracle =
            PriorOracle::new(scene, gt, OracleNoise::noiseless(), intr);
        let (depth, normals) = oracle
            .infer(FrameId(0), &ImageRgb::new(intr.width, intr.height))
            .unwrap();
        for v in 0..intr.height {
            for u in 0..intr.width {
                let got = depth.get(u, v).unwrap();
                let expected = truth.depth.get(u, v).unwrap();
                assert!((got - expected).abs() < 1e-5, "depth mismatch at ({u},{v})");
                let n_got = normals.get(u, v).unwrap();
                let n_expected = truth.normals.get(u, v).unwrap();
                assert!((n_got - n_expected).norm() < 1e-6);
                assert!((n_got.norm() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn oracle_outputs_are_deterministic_under_a_seed() {
        let scene = box_room(8);
        let gt = TrajectoryPoses::from_scene(&scene);
        let intr = intrinsics();
        let mut noise = OracleNoise::noiseless();
        noise.depth_noise = 0.02;
        noise.normal_sigma = 0.05;
        noise.seed = 123;
        let image = ImageRgb::new(intr.width, intr.height);
        let mut a = PriorOracle::new(scene.clone(), gt.clone(), noise, intr);
        let mut b = PriorOracle::new(scene, gt, noise, intr);
        // Different call orders must not change per-frame outputs.
        let (da2, _) = a.infer(FrameId(2), &image).unwrap();
        let (da1, _) = a.infer(FrameId(1), &image).unwrap();
        let (db1, _) = b.infer(FrameId(1), &image).unwrap();
        let (db2, _) = b.infer(FrameId(2), &image).unwrap();
        assert_eq!(da1, db1);
        assert_eq!(da2, db2);
    }
}
