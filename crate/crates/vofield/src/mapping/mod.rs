//! The mapping back-end: keyframe database, ray-bundle training of the
//! radiance field, and joint refinement of keyframe poses.
//!
//! Each optimization step samples a bundle of rays over the keyframes
//! (recent keyframes get a temporary sampling boost), renders them with
//! two-level sampling, combines the color / depth / normal / regularizer
//! losses, and applies adaptive-moment updates to the field parameters and
//! to the keyframe pose twists. The first keyframe's pose is the gauge and
//! never moves. Pose updates use left-multiplicative retraction: gradients
//! are taken w.r.t. a left increment at the current pose, and the increment
//! is folded into the pose after every step.

pub mod adam;
pub mod losses;

use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use thiserror::Error;

use crate::enhance::{EnhancedKeyframe, KeyframePriors};
use crate::field::render::{
    importance_samples, merge_sorted, render_backward, render_forward, stratified_samples,
    RenderCotangents, RenderForward,
};
use crate::field::{
    backward_sample, query_sample, FieldConfig, FieldGradients, FieldParams, SampleCache,
    SampleCotangents,
};
use crate::geometry::{unproject, FrameId, Intrinsics, Pose, Twist};
use crate::raster::ImageRgb;
use crate::synth::Aabb;

use adam::{AdamConfig, AdamState};
use losses::{
    loss_depth, loss_distortion, loss_normal, loss_proposal, loss_rgb, total_loss, DepthLossForm,
    LossBreakdown, LossError, LossWeights,
};

#[derive(Debug, Error)]
pub enum MapperError {
    #[error("no keyframes in the database")]
    NoKeyframes,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("aborting after {0} consecutive non-finite steps")]
    TooManySkips(usize),
}

#[derive(Clone, Debug)]
pub struct MapperConfig {
    pub field: FieldConfig,
    pub rays_per_batch: usize,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    /// Lower bound on the near plane when the camera sits inside the AABB.
    pub near_floor: f64,
    pub lr_hash: f64,
    pub lr_decoders: f64,
    pub lr_pose: f64,
    pub adam: AdamConfig,
    pub decoder_weight_decay: f64,
    /// Std-dev of the Gaussian window in the depth loss (scene units).
    pub depth_sigma: f64,
    pub depth_loss_form: DepthLossForm,
    pub loss_weights: LossWeights,
    pub enable_depth_loss: bool,
    pub enable_normal_loss: bool,
    /// Coarse-to-fine sampling with the interlevel proposal loss; when off,
    /// only stratified samples are used and the regularizer reports zero
    /// proposal loss.
    pub two_level_sampling: bool,
    pub recent_boost: f64,
    pub recent_boost_steps: usize,
    /// Pose refinement only starts after this many steps, giving the field
    /// time to become informative before camera gradients are trusted.
    pub pose_warmup_steps: usize,
    /// Uniform floor added to the importance histogram.
    pub histogram_floor: f64,
    pub chunk_rays: usize,
    pub parallel_rays: bool,
    /// Fractional margin added to the scene box inferred from keyframe
    /// depth back-projections.
    pub aabb_margin: f64,
    pub seed: u64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            field: FieldConfig::default(),
            rays_per_batch: 4096,
            coarse_samples: 48,
            fine_samples: 64,
            near_floor: 0.05,
            lr_hash: 1e-2,
            lr_decoders: 1e-3,
            lr_pose: 1e-4,
            adam: AdamConfig::default(),
            decoder_weight_decay: 1e-6,
            depth_sigma: 0.001,
            depth_loss_form: DepthLossForm::TerminationWeight,
            loss_weights: LossWeights::default(),
            enable_depth_loss: true,
            enable_normal_loss: true,
            two_level_sampling: true,
            recent_boost: 3.0,
            recent_boost_steps: 200,
            pose_warmup_steps: 100,
            histogram_floor: 1e-3,
            chunk_rays: 32,
            parallel_rays: true,
            aabb_margin: 0.1,
            seed: 0,
        }
    }
}

impl MapperConfig {
    /// Desk-scale defaults used by the synthetic acceptance scenes.
    pub fn desk() -> Self {
        Self {
            field: FieldConfig::desk(),
            rays_per_batch: 256,
            coarse_samples: 16,
            fine_samples: 24,
            depth_sigma: 0.05,
            ..Default::default()
        }
    }
}

/// One keyframe in the training database.
#[derive(Clone, Debug)]
pub struct KeyframeRecord {
    pub frame_id: FrameId,
    pub image: Arc<ImageRgb>,
    pub priors: Option<KeyframePriors>,
    pub pose: Pose,
    /// Patch-center depths, kept for scene-bound estimation when the dense
    /// prior is missing.
    pub sparse_depths: Vec<(Vector2<f64>, f64)>,
    pub insertion_step: usize,
    /// Set once the optimizer has taken a step with this keyframe in the
    /// database; tracker pose refreshes only apply before that.
    pub optimized: bool,
}

impl KeyframeRecord {
    pub fn rgb_only(&self) -> bool {
        self.priors.is_none()
    }
}

/// Telemetry for one optimization step.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub losses: LossBreakdown,
    pub total: f64,
    pub pose_update_norm: f64,
    pub skipped: bool,
    pub rays: usize,
}

/// One ray of a bundle, fully resolved at bundle-build time so chunk
/// processing is deterministic under any parallel schedule.
#[derive(Clone, Debug)]
struct BundleRay {
    keyframe: usize,
    origin: Vector3<f64>,
    dir_world: Vector3<f64>,
    dir_cam: Vector3<f64>,
    target_color: [f64; 3],
    /// Target depth as a distance along the ray.
    target_depth: Option<f64>,
    target_normal: Option<Vector3<f64>>,
    near: f64,
    far: f64,
    seed: u64,
    /// Overrides stochastic sampling (finite-difference harnesses freeze the
    /// sample positions so the loss is differentiable in the parameters).
    fixed: Option<FixedSampling>,
}

#[derive(Clone, Debug)]
struct FixedSampling {
    coarse: Vec<f64>,
    merged: Vec<f64>,
}

#[derive(Debug, Default)]
struct ChunkAccum {
    grads: Option<FieldGradients>,
    pose_grads: Vec<Twist>,
    rgb_sum: f64,
    depth_sum: f64,
    normal_sum: f64,
    dist_sum: f64,
    prop_sum: f64,
}

/// The mapping worker state.
pub struct Mapper {
    cfg: MapperConfig,
    intr: Intrinsics,
    field: Option<FieldParams>,
    keyframes: Vec<KeyframeRecord>,
    adam_hash: Option<AdamState>,
    adam_density: Option<AdamState>,
    adam_color: Option<AdamState>,
    pose_states: Vec<AdamState>,
    rng: StdRng,
    step: usize,
    lr_scale: f64,
    consecutive_skips: usize,
}

impl Mapper {
    pub fn new(intr: Intrinsics, cfg: MapperConfig) -> Self {
        let seed = cfg.seed;
        Self {
            cfg,
            intr,
            field: None,
            keyframes: Vec::new(),
            adam_hash: None,
            adam_density: None,
            adam_color: None,
            pose_states: Vec::new(),
            rng: StdRng::seed_from_u64(seed ^ 0x4d41_5050),
            step: 0,
            lr_scale: 1.0,
            consecutive_skips: 0,
        }
    }

    pub fn keyframes(&self) -> &[KeyframeRecord] {
        &self.keyframes
    }

    pub fn field(&self) -> Option<&FieldParams> {
        self.field.as_ref()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &MapperConfig {
        &self.cfg
    }

    /// Replaces the field (checkpoint restore).
    pub fn set_field(&mut self, field: FieldParams) {
        self.adam_hash = Some(AdamState::new(field.hash_table.len()));
        self.adam_density = Some(AdamState::new(field.density_mlp.params().count()));
        self.adam_color = Some(AdamState::new(field.color_mlp.params().count()));
        self.field = Some(field);
    }

    /// Appends an enhanced keyframe. Duplicate ids are rejected. Window
    /// poses attached to the emission refresh earlier keyframes that the
    /// optimizer has not touched yet.
    pub fn insert_keyframe(&mut self, enhanced: EnhancedKeyframe) -> bool {
        let kf = &enhanced.keyframe;
        if self.keyframes.iter().any(|k| k.frame_id == kf.frame_id) {
            eprintln!("warning: duplicate keyframe {} rejected", kf.frame_id);
            return false;
        }
        for (fid, pose) in &kf.window_poses {
            if let Some(existing) = self
                .keyframes
                .iter_mut()
                .find(|k| k.frame_id == *fid && !k.optimized)
            {
                existing.pose = *pose;
            }
        }
        self.keyframes.push(KeyframeRecord {
            frame_id: kf.frame_id,
            image: Arc::clone(&kf.image),
            priors: enhanced.priors,
            pose: kf.pose,
            sparse_depths: kf.sparse_depths.clone(),
            insertion_step: self.step,
            optimized: false,
        });
        self.pose_states.push(AdamState::new(6));
        true
    }

    /// Scene bound from keyframe depth back-projections (dense priors where
    /// available, sparse patch depths otherwise), inflated by the margin.
    /// Frozen at first use.
    fn infer_aabb(&self) -> Aabb {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut grow = |p: Vector3<f64>| {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        };
        for kf in &self.keyframes {
            grow(kf.pose.camera_center());
            let world = kf.pose.inverse();
            if let Some(priors) = &kf.priors {
                let stride = 4;
                for v in (0..priors.depth.height).step_by(stride) {
                    for u in (0..priors.depth.width).step_by(stride) {
                        if let Some(z) = priors.depth.get(u, v) {
                            if let Ok(cam) =
                                unproject(&Vector2::new(u as f64, v as f64), 1.0 / z, &self.intr)
                            {
                                grow(world.transform_point(&cam));
                            }
                        }
                    }
                }
            } else {
                for (pixel, depth) in &kf.sparse_depths {
                    if let Ok(cam) = unproject(pixel, 1.0 / depth, &self.intr) {
                        grow(world.transform_point(&cam));
                    }
                }
            }
        }
        if lo[0] > hi[0] {
            // Degenerate database; fall back to a unit box around origin.
            return Aabb::new([-1.0; 3], [1.0; 3]);
        }
        Aabb::new(lo, hi).inflated(self.cfg.aabb_margin)
    }

    fn ensure_field(&mut self) {
        if self.field.is_none() {
            let aabb = self.infer_aabb();
            let field = FieldParams::new(self.cfg.field, aabb, self.cfg.seed);
            self.set_field(field);
        }
    }

    /// Per-keyframe sampling weights: the newest keyframe is boosted for its
    /// first `recent_boost_steps` steps after insertion.
    pub fn sampling_weights(&self) -> Vec<f64> {
        let newest = self.keyframes.len().saturating_sub(1);
        self.keyframes
            .iter()
            .enumerate()
            .map(|(k, kf)| {
                if k == newest
                    && self.keyframes.len() > 1
                    && self.step < kf.insertion_step + self.cfg.recent_boost_steps
                {
                    self.cfg.recent_boost
                } else {
                    1.0
                }
            })
            .collect()
    }

    fn pick_keyframe(weights: &[f64], rng: &mut StdRng) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = rng.random_range(0.0..total);
        for (k, w) in weights.iter().enumerate() {
            if u < *w {
                return k;
            }
            u -= w;
        }
        weights.len() - 1
    }

    fn build_bundle(&mut self, count: usize) -> Vec<BundleRay> {
        let weights = self.sampling_weights();
        let aabb = self.field.as_ref().expect("field init").aabb;
        let mut bundle = Vec::with_capacity(count);
        while bundle.len() < count {
            let kf_idx = Self::pick_keyframe(&weights, &mut self.rng);
            let kf = &self.keyframes[kf_idx];
            let u = self.rng.random_range(0..self.intr.width);
            let v = self.rng.random_range(0..self.intr.height);
            let seed: u64 = self.rng.random();
            let pixel = Vector2::new(u as f64, v as f64);
            let dir_cam = unproject(&pixel, 1.0, &self.intr)
                .expect("unit-depth unprojection")
                .normalize();
            let origin = kf.pose.camera_center();
            let dir_world = kf.pose.rotate_to_world(&dir_cam);
            let Some((t0, t1)) = aabb.clip_ray(&origin, &dir_world) else {
                continue;
            };
            let near = t0.max(self.cfg.near_floor);
            let far = t1;
            if far <= near {
                continue;
            }
            let [r, g, b] = kf.image.get(u, v);
            let target_depth = if self.cfg.enable_depth_loss {
                kf.priors
                    .as_ref()
                    .and_then(|p| p.depth.get(u, v))
                    .map(|z| z / dir_cam.z)
            } else {
                None
            };
            let target_normal = if self.cfg.enable_normal_loss {
                kf.priors.as_ref().and_then(|p| p.normals.get(u, v))
            } else {
                None
            };
            bundle.push(BundleRay {
                keyframe: kf_idx,
                origin,
                dir_world,
                dir_cam,
                target_color: [f64::from(r), f64::from(g), f64::from(b)],
                target_depth,
                target_normal,
                near,
                far,
                seed,
                fixed: None,
            });
        }
        bundle
    }

    /// One training step: sample a bundle, render, combine the losses,
    /// backpropagate, and update parameters and poses. Non-finite losses
    /// skip the update and halve the learning rate; ten consecutive skips
    /// abort.
    pub fn optimize_step(&mut self) -> Result<StepMetrics, MapperError> {
        if self.keyframes.is_empty() {
            return Err(MapperError::NoKeyframes);
        }
        self.ensure_field();
        let bundle = self.build_bundle(self.cfg.rays_per_batch);
        let ray_count = bundle.len().max(1);
        let depth_rays = bundle.iter().filter(|r| r.target_depth.is_some()).count();
        let normal_rays = bundle.iter().filter(|r| r.target_normal.is_some()).count();
        let scales = LossScales {
            rgb: 1.0 / ray_count as f64,
            depth: if depth_rays > 0 {
                self.cfg.loss_weights.depth / depth_rays as f64
            } else {
                0.0
            },
            normal: if normal_rays > 0 {
                self.cfg.loss_weights.normal / normal_rays as f64
            } else {
                0.0
            },
            dist: self.cfg.loss_weights.distortion / ray_count as f64,
            prop: 1.0 / ray_count as f64,
            depth_mean: 1.0 / depth_rays.max(1) as f64,
            normal_mean: 1.0 / normal_rays.max(1) as f64,
        };

        let field = self.field.as_ref().unwrap();
        let poses: Vec<Pose> = self.keyframes.iter().map(|k| k.pose).collect();
        let chunks: Vec<&[BundleRay]> = bundle.chunks(self.cfg.chunk_rays.max(1)).collect();
        let process = |chunk: &&[BundleRay]| -> ChunkAccum {
            let mut accum = ChunkAccum {
                grads: Some(FieldGradients::zeros(field)),
                pose_grads: vec![Twist::zeros(); poses.len()],
                ..Default::default()
            };
            for ray in chunk.iter() {
                process_ray(field, &poses, ray, &self.cfg, &scales, &mut accum);
            }
            accum
        };
        let results: Vec<ChunkAccum> = if self.cfg.parallel_rays {
            chunks.par_iter().map(process).collect()
        } else {
            chunks.iter().map(process).collect()
        };

        // Deterministic fixed-order reduction.
        let mut grads = FieldGradients::zeros(field);
        let mut pose_grads = vec![Twist::zeros(); poses.len()];
        let mut losses = LossBreakdown::default();
        for chunk in &results {
            if let Some(g) = &chunk.grads {
                grads.add_from(g);
            }
            for (a, b) in pose_grads.iter_mut().zip(&chunk.pose_grads) {
                *a += b;
            }
            losses.rgb += chunk.rgb_sum;
            losses.depth += chunk.depth_sum;
            losses.normal += chunk.normal_sum;
            losses.distortion += chunk.dist_sum;
            losses.proposal += chunk.prop_sum;
        }
        losses.rgb /= ray_count as f64;
        losses.depth *= scales.depth_mean;
        losses.normal *= scales.normal_mean;
        losses.distortion /= ray_count as f64;
        losses.proposal /= ray_count as f64;

        let total = match total_loss(&losses, &self.cfg.loss_weights) {
            Ok(v) if v.is_finite() => v,
            _ => {
                self.consecutive_skips += 1;
                self.lr_scale *= 0.5;
                if self.consecutive_skips >= 10 {
                    return Err(MapperError::TooManySkips(self.consecutive_skips));
                }
                self.step += 1;
                return Ok(StepMetrics {
                    step: self.step,
                    losses,
                    total: f64::NAN,
                    pose_update_norm: 0.0,
                    skipped: true,
                    rays: ray_count,
                });
            }
        };
        self.consecutive_skips = 0;

        // Parameter updates.
        let field = self.field.as_mut().unwrap();
        let lr_scale = self.lr_scale;
        self.adam_hash.as_mut().unwrap().update(
            field.hash_table.iter_mut(),
            grads.hash_table.iter(),
            self.cfg.lr_hash * lr_scale,
            &self.cfg.adam,
        );
        let decoder_cfg = AdamConfig {
            weight_decay: self.cfg.decoder_weight_decay,
            ..self.cfg.adam
        };
        let density_grads: Vec<f64> = grads
            .density_mlp
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .copied()
            .collect();
        self.adam_density.as_mut().unwrap().update(
            field.density_mlp.params_mut(),
            density_grads.iter(),
            self.cfg.lr_decoders * lr_scale,
            &decoder_cfg,
        );
        let color_grads: Vec<f64> = grads
            .color_mlp
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .copied()
            .collect();
        self.adam_color.as_mut().unwrap().update(
            field.color_mlp.params_mut(),
            color_grads.iter(),
            self.cfg.lr_decoders * lr_scale,
            &decoder_cfg,
        );

        // Pose retraction; keyframe 0 is the gauge and never moves, and
        // refinement waits out the field warmup.
        let mut pose_update_norm = 0.0;
        let poses_active = self.step >= self.cfg.pose_warmup_steps;
        for (idx, kf) in self.keyframes.iter_mut().enumerate() {
            kf.optimized = true;
            if idx == 0 || !poses_active {
                continue;
            }
            let grad = &pose_grads[idx];
            let mut twist = [0.0; 6];
            let state = &mut self.pose_states[idx];
            // Adam on the twist coordinates, then retract.
            state.step += 1;
            let bc1 = 1.0 - self.cfg.adam.beta1.powi(state.step as i32);
            let bc2 = 1.0 - self.cfg.adam.beta2.powi(state.step as i32);
            for k in 0..6 {
                let g = grad[k];
                state.m[k] = self.cfg.adam.beta1 * state.m[k] + (1.0 - self.cfg.adam.beta1) * g;
                state.v[k] =
                    self.cfg.adam.beta2 * state.v[k] + (1.0 - self.cfg.adam.beta2) * g * g;
                let m_hat = state.m[k] / bc1;
                let v_hat = state.v[k] / bc2;
                twist[k] = -self.cfg.lr_pose * lr_scale * m_hat / (v_hat.sqrt() + 1e-15);
            }
            let delta = Twist::from_row_slice(&twist);
            pose_update_norm += delta.norm_squared();
            kf.pose = crate::geometry::se3_exp(&delta)
                .expect("finite pose update")
                .compose(&kf.pose);
        }

        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            losses,
            total,
            pose_update_norm: pose_update_norm.sqrt(),
            skipped: false,
            rays: ray_count,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct LossScales {
    rgb: f64,
    depth: f64,
    normal: f64,
    dist: f64,
    prop: f64,
    depth_mean: f64,
    normal_mean: f64,
}

/// Forward + backward for one ray, accumulating into the chunk.
fn process_ray(
    field: &FieldParams,
    poses: &[Pose],
    ray: &BundleRay,
    cfg: &MapperConfig,
    scales: &LossScales,
    accum: &mut ChunkAccum,
) {
    let mut rng = StdRng::seed_from_u64(ray.seed);
    let trace = trace_ray(field, ray, cfg, &mut rng, true);

    // Per-ray losses (unscaled) and cotangents.
    let (rgb_value, rgb_cot) = loss_rgb(&trace.fine.color, &ray.target_color);
    accum.rgb_sum += rgb_value;

    let mut cot = RenderCotangents::zeros(trace.fine.distances.len());
    for c in 0..3 {
        cot.color[c] = scales.rgb * rgb_cot[c];
    }

    if let Some(target_depth) = ray.target_depth {
        if let Ok((value, weight_cot, trans_cot)) = loss_depth(
            &trace.fine,
            target_depth,
            cfg.depth_sigma,
            cfg.depth_loss_form,
        ) {
            accum.depth_sum += value;
            for (c, w) in cot.weights.iter_mut().zip(&weight_cot) {
                *c += scales.depth * w;
            }
            for (c, t) in cot.transmittances.iter_mut().zip(&trans_cot) {
                *c += scales.depth * t;
            }
        }
    }

    let pose = &poses[ray.keyframe];
    let rotation = pose.rotation();
    let mut pose_rot_extra = Vector3::zeros();
    if let Some(target_normal) = ray.target_normal {
        // Rendered normal lives in world coordinates; the prior is in the
        // camera frame of this keyframe.
        let n_world = trace.fine.normal;
        if n_world.norm() > 0.5 {
            let n_cam = rotation * n_world;
            let (value, cam_cot) = loss_normal(&n_cam, &target_normal);
            accum.normal_sum += value;
            let scaled = cam_cot * scales.normal;
            cot.normal += rotation.inverse() * scaled;
            // Left-increment rotation term of N_cam = R * N_world.
            pose_rot_extra += (rotation * n_world).cross(&scaled);
        }
    }

    let (dist_value, dist_cot) = loss_distortion(&trace.fine);
    accum.dist_sum += dist_value;
    for (c, d) in cot.weights.iter_mut().zip(&dist_cot) {
        *c += scales.dist * d;
    }

    // Interlevel proposal loss: fine mass must not exceed the coarse
    // prediction; exact gradients reach both passes.
    let mut coarse_weight_cot = vec![0.0; trace.coarse.distances.len()];
    if cfg.two_level_sampling && !trace.coarse.distances.is_empty() {
        let (value, coarse_cot, fine_cot) = loss_proposal(
            &trace.coarse.distances,
            &trace.coarse.weights,
            &trace.fine.distances,
            &trace.fine.weights,
            ray.far,
        );
        accum.prop_sum += value;
        for (c, p) in coarse_weight_cot.iter_mut().zip(&coarse_cot) {
            *c = scales.prop * p;
        }
        for (c, p) in cot.weights.iter_mut().zip(&fine_cot) {
            *c += scales.prop * p;
        }
    }

    // Backward through the fine rendering and samples.
    let grads = accum.grads.as_mut().expect("chunk grads");
    let sample_cot = render_backward(&trace.fine, &trace.fine_colors, &trace.fine_normals, &cot);
    let mut origin_cot = Vector3::zeros();
    let mut dir_cot = Vector3::zeros();
    for (t, cache) in trace.fine_caches.iter().enumerate() {
        let sc = SampleCotangents {
            density: sample_cot.density[t],
            color: sample_cot.color[t],
            normal: if trace.fine_normals[t].is_some()
                && sample_cot.normal[t].norm_squared() > 0.0
            {
                Some(sample_cot.normal[t])
            } else {
                None
            },
        };
        let (pos_cot, d_cot) = backward_sample(field, cache, &sc, grads);
        origin_cot += pos_cot;
        dir_cot += d_cot + pos_cot * trace.fine.distances[t];
    }

    // Backward through the coarse pass (proposal loss only).
    if cfg.two_level_sampling && !trace.coarse.distances.is_empty() {
        let mut coarse_render_cot = RenderCotangents::zeros(trace.coarse.distances.len());
        coarse_render_cot.weights = coarse_weight_cot;
        let coarse_sample_cot = render_backward(
            &trace.coarse,
            &trace.coarse_colors,
            &trace.coarse_normals,
            &coarse_render_cot,
        );
        for (t, cache) in trace.coarse_caches.iter().enumerate() {
            let sc = SampleCotangents {
                density: coarse_sample_cot.density[t],
                ..Default::default()
            };
            let (pos_cot, d_cot) = backward_sample(field, cache, &sc, grads);
            origin_cot += pos_cot;
            dir_cot += d_cot + pos_cot * trace.coarse.distances[t];
        }
    }

    // Chain ray origin/direction into the pose twist (left increment):
    //   camera center: d c / d dt = -R^T        => dt_cot = -R * origin_cot
    //   direction:     d dir / d w = R^T [dir_cam]x => w_cot = (R dir_cot) x dir_cam
    let rot = rotation;
    let dt_cot = -(rot * origin_cot);
    let w_cot = (rot * dir_cot).cross(&ray.dir_cam) + pose_rot_extra;
    let pg = &mut accum.pose_grads[ray.keyframe];
    for k in 0..3 {
        pg[k] += dt_cot[k];
        pg[3 + k] += w_cot[k];
    }
}

/// Forward results of one ray trace.
pub struct RayTrace {
    pub coarse: RenderForward,
    pub fine: RenderForward,
    coarse_colors: Vec<[f64; 3]>,
    coarse_normals: Vec<Option<Vector3<f64>>>,
    coarse_caches: Vec<SampleCache>,
    fine_colors: Vec<[f64; 3]>,
    fine_normals: Vec<Option<Vector3<f64>>>,
    fine_caches: Vec<SampleCache>,
}

fn trace_ray(
    field: &FieldParams,
    ray: &BundleRay,
    cfg: &MapperConfig,
    rng: &mut StdRng,
    keep_caches: bool,
) -> RayTrace {
    let coarse_dists = match &ray.fixed {
        Some(fixed) => fixed.coarse.clone(),
        None => stratified_samples(ray.near, ray.far, cfg.coarse_samples, rng),
    };
    let mut coarse_caches = Vec::new();
    let mut coarse_densities = Vec::with_capacity(coarse_dists.len());
    for &d in &coarse_dists {
        let p = ray.origin + ray.dir_world * d;
        let (out, cache) = query_sample(field, &p, &ray.dir_world, false);
        coarse_densities.push(out.density);
        if keep_caches {
            coarse_caches.push(cache);
        }
    }
    let coarse_colors = vec![[0.0; 3]; coarse_dists.len()];
    let coarse_normals = vec![None; coarse_dists.len()];
    let coarse = render_forward(
        &coarse_dists,
        &coarse_densities,
        &coarse_colors,
        &coarse_normals,
        (ray.far - coarse_dists.last().copied().unwrap_or(ray.far)).max(0.0),
    );

    let merged = match &ray.fixed {
        Some(fixed) => fixed.merged.clone(),
        None if cfg.two_level_sampling => {
            let fine = importance_samples(
                &coarse_dists,
                &coarse.weights,
                ray.far,
                cfg.fine_samples,
                cfg.histogram_floor / cfg.coarse_samples.max(1) as f64,
                rng,
            );
            merge_sorted(&coarse_dists, &fine)
        }
        None => coarse_dists.clone(),
    };

    let mut fine_caches = Vec::new();
    let mut densities = Vec::with_capacity(merged.len());
    let mut colors = Vec::with_capacity(merged.len());
    let mut normals = Vec::with_capacity(merged.len());
    for &d in &merged {
        let p = ray.origin + ray.dir_world * d;
        let (out, cache) = query_sample(field, &p, &ray.dir_world, true);
        densities.push(out.density);
        colors.push(out.color);
        normals.push(out.normal);
        if keep_caches {
            fine_caches.push(cache);
        }
    }
    let fine = render_forward(
        &merged,
        &densities,
        &colors,
        &normals,
        (ray.far - merged.last().copied().unwrap_or(ray.far)).max(0.0),
    );

    RayTrace {
        coarse,
        fine,
        coarse_colors,
        coarse_normals,
        coarse_caches,
        fine_colors: colors,
        fine_normals: normals,
        fine_caches,
    }
}

/// Renders a full view from the field (no gradients): returns the color
/// image, the expected-depth map (as camera-z), and per-pixel opacity.
pub fn render_view(
    field: &FieldParams,
    pose: &Pose,
    intr: &Intrinsics,
    cfg: &MapperConfig,
    seed: u64,
) -> (ImageRgb, crate::raster::DepthMap, Vec<f64>) {
    let mut image = ImageRgb::new(intr.width, intr.height);
    let mut depth = crate::raster::DepthMap::new_invalid(intr.width, intr.height);
    let mut opacity = vec![0.0; intr.width * intr.height];
    let rows: Vec<usize> = (0..intr.height).collect();
    let results: Vec<Vec<([f32; 3], f64, f64)>> = if cfg.parallel_rays {
        rows.par_iter()
            .map(|&v| render_row(field, pose, intr, cfg, seed, v))
            .collect()
    } else {
        rows.iter()
            .map(|&v| render_row(field, pose, intr, cfg, seed, v))
            .collect()
    };
    for (v, row) in results.into_iter().enumerate() {
        for (u, (color, z, op)) in row.into_iter().enumerate() {
            image.set(u, v, color);
            if z > 0.0 {
                depth.set(u, v, z);
            }
            opacity[v * intr.width + u] = op;
        }
    }
    (image, depth, opacity)
}

fn render_row(
    field: &FieldParams,
    pose: &Pose,
    intr: &Intrinsics,
    cfg: &MapperConfig,
    seed: u64,
    v: usize,
) -> Vec<([f32; 3], f64, f64)> {
    let origin = pose.camera_center();
    let mut out = Vec::with_capacity(intr.width);
    for u in 0..intr.width {
        let pixel = Vector2::new(u as f64, v as f64);
        let dir_cam = unproject(&pixel, 1.0, intr).expect("unit unprojection").normalize();
        let dir_world = pose.rotate_to_world(&dir_cam);
        let Some((t0, t1)) = field.aabb.clip_ray(&origin, &dir_world) else {
            out.push(([0.0; 3], 0.0, 0.0));
            continue;
        };
        let near = t0.max(cfg.near_floor);
        if t1 <= near {
            out.push(([0.0; 3], 0.0, 0.0));
            continue;
        }
        let ray = BundleRay {
            keyframe: 0,
            origin,
            dir_world,
            dir_cam,
            target_color: [0.0; 3],
            target_depth: None,
            target_normal: None,
            near,
            far: t1,
            seed: seed ^ ((v as u64) << 20 | u as u64),
            fixed: None,
        };
        let mut rng = StdRng::seed_from_u64(ray.seed);
        let trace = trace_ray(field, &ray, cfg, &mut rng, false);
        let color = [
            trace.fine.color[0] as f32,
            trace.fine.color[1] as f32,
            trace.fine.color[2] as f32,
        ];
        // Expected ray distance -> camera z.
        let z = trace.fine.depth * dir_cam.z;
        out.push((color, z, trace.fine.opacity));
    }
    out
}

pub mod diagnostics;
