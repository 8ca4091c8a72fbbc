//! Finite-difference verification of the training gradients.
//!
//! Builds a small two-keyframe, four-ray scene with ground-truth priors,
//! freezes the sample positions, and compares every analytic gradient
//! (hash entries, decoder weights, pose twists) against central finite
//! differences, per loss component and for the weighted total.

use nalgebra::Vector2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::sync::Arc;

use crate::enhance::KeyframePriors;
use crate::field::{FieldConfig, FieldGradients, FieldParams, HashConfig};
use crate::geometry::{se3_exp, unproject, Intrinsics, Pose, Twist};
use crate::synth::{box_room, render_groundtruth};

use super::losses::LossWeights;
use super::{
    process_ray, BundleRay, ChunkAccum, FixedSampling, LossScales, MapperConfig, trace_ray,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossComponent {
    Rgb,
    Depth,
    Normal,
    Regularizer,
    Total,
}

impl LossComponent {
    pub const ALL: [LossComponent; 5] = [
        LossComponent::Rgb,
        LossComponent::Depth,
        LossComponent::Normal,
        LossComponent::Regularizer,
        LossComponent::Total,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossComponent::Rgb => "rgb",
            LossComponent::Depth => "depth",
            LossComponent::Normal => "normal",
            LossComponent::Regularizer => "regularizer",
            LossComponent::Total => "total",
        }
    }
}

/// Maximum relative gradient errors per parameter class.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClassErrors {
    pub hash: f64,
    pub density: f64,
    pub color: f64,
    pub pose: f64,
}

impl ClassErrors {
    pub fn max(&self) -> f64 {
        self.hash.max(self.density).max(self.color).max(self.pose)
    }
}

#[derive(Clone, Debug)]
pub struct GradientCheckReport {
    pub per_component: Vec<(LossComponent, ClassErrors)>,
}

impl GradientCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_component
            .iter()
            .map(|(_, e)| e.max())
            .fold(0.0, f64::max)
    }
}

fn micro_config() -> MapperConfig {
    MapperConfig {
        field: FieldConfig {
            hash: HashConfig {
                levels: 3,
                features_per_level: 2,
                table_size_log2: 8,
                base_resolution: 4,
                growth_factor: 1.7,
            },
            hidden_dim: 8,
            geo_features: 4,
            color_hidden_dim: 8,
            sh_bands: 4,
            appearance_embedding: false,
        },
        rays_per_batch: 4,
        coarse_samples: 10,
        fine_samples: 8,
        depth_sigma: 0.1,
        parallel_rays: false,
        ..MapperConfig::desk()
    }
}

fn masked_scales(
    component: LossComponent,
    rays: usize,
    depth_rays: usize,
    normal_rays: usize,
    weights: &LossWeights,
) -> LossScales {
    let full = LossScales {
        rgb: 1.0 / rays as f64,
        depth: if depth_rays > 0 {
            weights.depth / depth_rays as f64
        } else {
            0.0
        },
        normal: if normal_rays > 0 {
            weights.normal / normal_rays as f64
        } else {
            0.0
        },
        dist: weights.distortion / rays as f64,
        prop: 1.0 / rays as f64,
        depth_mean: 1.0 / depth_rays.max(1) as f64,
        normal_mean: 1.0 / normal_rays.max(1) as f64,
    };
    let mut masked = full;
    if component != LossComponent::Total {
        masked.rgb = 0.0;
        masked.depth = 0.0;
        masked.normal = 0.0;
        masked.dist = 0.0;
        masked.prop = 0.0;
        match component {
            LossComponent::Rgb => masked.rgb = full.rgb,
            LossComponent::Depth => masked.depth = full.depth,
            LossComponent::Normal => masked.normal = full.normal,
            LossComponent::Regularizer => {
                masked.dist = full.dist;
                masked.prop = full.prop;
            }
            LossComponent::Total => unreachable!(),
        }
    }
    masked
}

struct Harness {
    cfg: MapperConfig,
    rays: Vec<BundleRay>,
}

fn build_harness(seed: u64) -> (Harness, FieldParams, Vec<Pose>) {
    let cfg = micro_config();
    let intr = Intrinsics::new(14.0, 14.0, 8.0, 6.0, 16, 12).unwrap();
    let scene = box_room(4);
    let poses: Vec<Pose> = vec![scene.trajectory.pose(0), scene.trajectory.pose(1)];

    let mut priors = Vec::new();
    let mut images = Vec::new();
    for pose in &poses {
        let gt = render_groundtruth(&scene, pose, &intr);
        priors.push(KeyframePriors {
            depth: gt.depth.clone(),
            normals: gt.normals.clone(),
            scale: 1.0,
            shift: 0.0,
        });
        images.push(Arc::new(gt.image));
    }

    let mut field = FieldParams::new(cfg.field, scene.aabb.inflated(0.1), seed);
    let mut rng = StdRng::seed_from_u64(seed ^ 0xabc);
    for e in field.hash_table.iter_mut() {
        *e = rng.random_range(-0.4..0.4);
    }

    // Four rays spread over the two keyframes, all with valid targets.
    let pixels = [(0usize, 3usize, 3usize), (0, 12, 8), (1, 5, 9), (1, 10, 2)];
    let mut rays = Vec::new();
    for (kf, u, v) in pixels {
        let pose = &poses[kf];
        let pixel = Vector2::new(u as f64, v as f64);
        let dir_cam = unproject(&pixel, 1.0, &intr).unwrap().normalize();
        let origin = pose.camera_center();
        let dir_world = pose.rotate_to_world(&dir_cam);
        let (t0, t1) = field.aabb.clip_ray(&origin, &dir_world).expect("ray hits box");
        let near = t0.max(cfg.near_floor);
        let [r, g, b] = images[kf].get(u, v);
        let depth_z = priors[kf].depth.get(u, v).unwrap();
        let normal = priors[kf].normals.get(u, v).unwrap();
        let mut ray = BundleRay {
            keyframe: kf,
            origin,
            dir_world,
            dir_cam,
            target_color: [f64::from(r), f64::from(g), f64::from(b)],
            target_depth: Some(depth_z / dir_cam.z),
            target_normal: Some(normal),
            near,
            far: t1,
            seed: seed ^ ((u as u64) << 8 | v as u64),
            fixed: None,
        };
        // Freeze the sampling so the loss is differentiable in the
        // parameters.
        let mut rng = StdRng::seed_from_u64(ray.seed);
        let trace = trace_ray(&field, &ray, &cfg, &mut rng, false);
        ray.fixed = Some(FixedSampling {
            coarse: trace.coarse.distances.clone(),
            merged: trace.fine.distances.clone(),
        });
        rays.push(ray);
    }

    (Harness { cfg, rays }, field, poses)
}

fn evaluate(
    harness: &Harness,
    field: &FieldParams,
    poses: &[Pose],
    scales: &LossScales,
) -> (f64, FieldGradients, Vec<Twist>) {
    let mut accum = ChunkAccum {
        grads: Some(FieldGradients::zeros(field)),
        pose_grads: vec![Twist::zeros(); poses.len()],
        ..Default::default()
    };
    // Rays must be re-anchored to the perturbed poses: origin and direction
    // are pose-dependent.
    for ray in &harness.rays {
        let pose = &poses[ray.keyframe];
        let mut ray = ray.clone();
        ray.origin = pose.camera_center();
        ray.dir_world = pose.rotate_to_world(&ray.dir_cam);
        process_ray(field, poses, &ray, &harness.cfg, scales, &mut accum);
    }
    let value = accum.rgb_sum * scales.rgb
        + accum.depth_sum * scales.depth
        + accum.normal_sum * scales.normal
        + accum.dist_sum * scales.dist
        + accum.prop_sum * scales.prop;
    (value, accum.grads.unwrap(), accum.pose_grads)
}

/// Relative error with a magnitude-aware floor: gradients far below the
/// class's dominant magnitude are compared absolutely (central differences
/// carry ~1e-11 roundoff, so a pure relative comparison of near-zero
/// gradients only measures that noise).
fn rel_err(analytic: f64, fd: f64, class_scale: f64) -> f64 {
    let denom = analytic
        .abs()
        .max(fd.abs())
        .max(1e-3 * class_scale)
        .max(1e-10);
    (analytic - fd).abs() / denom
}

fn max_abs(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Runs the full check. `seed` controls the scene parameters; the report
/// carries the worst relative error per loss component and parameter class.
pub fn finite_difference_check(seed: u64) -> GradientCheckReport {
    let (harness, mut field, poses) = build_harness(seed);
    let depth_rays = harness.rays.iter().filter(|r| r.target_depth.is_some()).count();
    let normal_rays = harness
        .rays
        .iter()
        .filter(|r| r.target_normal.is_some())
        .count();
    let rays = harness.rays.len();

    let mut report = GradientCheckReport {
        per_component: Vec::new(),
    };
    let step = 1e-6;

    for component in LossComponent::ALL {
        let scales = masked_scales(
            component,
            rays,
            depth_rays,
            normal_rays,
            &harness.cfg.loss_weights,
        );
        let (_, grads, pose_grads) = evaluate(&harness, &field, &poses, &scales);
        let mut errors = ClassErrors::default();

        // Hash entries.
        let hash_scale = max_abs(grads.hash_table.iter().copied());
        for idx in 0..field.hash_table.len() {
            let original = field.hash_table[idx];
            field.hash_table[idx] = original + step;
            let (up, _, _) = evaluate(&harness, &field, &poses, &scales);
            field.hash_table[idx] = original - step;
            let (down, _, _) = evaluate(&harness, &field, &poses, &scales);
            field.hash_table[idx] = original;
            let fd = (up - down) / (2.0 * step);
            errors.hash = errors.hash.max(rel_err(grads.hash_table[idx], fd, hash_scale));
        }

        // Decoder parameters.
        for decoder in 0..2 {
            let analytic: Vec<f64> = if decoder == 0 {
                grads
                    .density_mlp
                    .layers
                    .iter()
                    .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
                    .copied()
                    .collect()
            } else {
                grads
                    .color_mlp
                    .layers
                    .iter()
                    .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
                    .copied()
                    .collect()
            };
            let class_scale = max_abs(analytic.iter().copied());
            for idx in 0..analytic.len() {
                let perturb = |field: &mut FieldParams, delta: f64| {
                    let mlp = if decoder == 0 {
                        &mut field.density_mlp
                    } else {
                        &mut field.color_mlp
                    };
                    if let Some(p) = mlp.params_mut().nth(idx) {
                        *p += delta;
                    }
                };
                perturb(&mut field, step);
                let (up, _, _) = evaluate(&harness, &field, &poses, &scales);
                perturb(&mut field, -2.0 * step);
                let (down, _, _) = evaluate(&harness, &field, &poses, &scales);
                perturb(&mut field, step);
                let fd = (up - down) / (2.0 * step);
                let err = rel_err(analytic[idx], fd, class_scale);
                if decoder == 0 {
                    errors.density = errors.density.max(err);
                } else {
                    errors.color = errors.color.max(err);
                }
            }
        }

        // Pose twists, multiplicative perturbation.
        let pose_scale = max_abs(pose_grads.iter().flat_map(|g| g.iter().copied()));
        for (kf, base) in poses.iter().enumerate() {
            for axis in 0..6 {
                let mut delta = Twist::zeros();
                delta[axis] = step;
                let mut plus = poses.to_vec();
                plus[kf] = se3_exp(&delta).unwrap().compose(base);
                let (up, _, _) = evaluate(&harness, &field, &plus, &scales);
                let mut minus = poses.to_vec();
                minus[kf] = se3_exp(&(-delta)).unwrap().compose(base);
                let (down, _, _) = evaluate(&harness, &field, &minus, &scales);
                let fd = (up - down) / (2.0 * step);
                errors.pose = errors.pose.max(rel_err(pose_grads[kf][axis], fd, pose_scale));
            }
        }

        report.per_component.push((component, errors));
    }
    report
}
