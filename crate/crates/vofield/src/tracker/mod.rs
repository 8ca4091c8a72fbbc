//! Sliding-window sparse visual odometry over a patch graph.
//!
//! Each incoming frame contributes a set of randomly sampled square patches
//! with a single inverse depth each. Patches connect via edges to all frames
//! in their temporal vicinity; a [`CorrespondenceProvider`] predicts a
//! corrected target pixel and a per-axis confidence for every edge, and the
//! bundle adjuster in [`ba`] refines window poses and patch inverse depths
//! against those targets.

pub mod ba;

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::geometry::{reproject_pixel, FrameId, Intrinsics, Patch, Pose};
use crate::raster::ImageRgb;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("image {width}x{height} too small for {size}x{size} patches")]
    ImageTooSmall {
        width: usize,
        height: usize,
        size: usize,
    },
    #[error("patch count must be >= 1")]
    ZeroPatches,
    #[error(transparent)]
    Ba(#[from] ba::BaError),
}

/// Raised by correspondence providers; the tracker drops the frame and keeps
/// its state unchanged.
#[derive(Debug, Error)]
#[error("correspondence provider failed: {0}")]
pub struct ProviderError(pub String);

/// One keyframe inside the sliding window.
#[derive(Clone, Debug)]
pub struct GraphFrame {
    pub id: FrameId,
    pub timestamp: f64,
    pub pose: Pose,
    pub image: Arc<ImageRgb>,
}

/// Patch-to-frame edge with its provider-supplied target.
#[derive(Clone, Debug)]
pub struct GraphEdge {
    pub patch: usize,
    pub target_frame: FrameId,
    /// Corrected target pixel (current reprojection plus the predicted
    /// correction); `None` until the provider has run.
    pub target_pixel: Option<Vector2<f64>>,
    /// Per-axis non-negative confidence weights.
    pub confidence: Vector2<f64>,
}

/// Bipartite patch-frame graph over the current window.
#[derive(Clone, Debug, Default)]
pub struct PatchGraph {
    pub frames: Vec<GraphFrame>,
    pub patches: Vec<Patch>,
    pub edges: Vec<GraphEdge>,
}

impl PatchGraph {
    pub fn frame_position(&self, id: FrameId) -> Option<usize> {
        self.frames.iter().position(|f| f.id == id)
    }

    pub fn frame(&self, id: FrameId) -> Option<&GraphFrame> {
        self.frames.iter().find(|f| f.id == id)
    }

    pub fn patches_of(&self, id: FrameId) -> impl Iterator<Item = (usize, &Patch)> {
        self.patches
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.frame_id == id)
    }

    /// Median inverse depth across all window patches.
    pub fn median_inv_depth(&self) -> Option<f64> {
        if self.patches.is_empty() {
            return None;
        }
        let mut depths: Vec<f64> = self.patches.iter().map(|p| p.inv_depth).collect();
        depths.sort_by(|a, b| a.total_cmp(b));
        Some(depths[depths.len() / 2])
    }

    /// Removes a frame together with its patches and all incident edges.
    pub fn remove_frame(&mut self, id: FrameId) {
        let keep: Vec<bool> = self.patches.iter().map(|p| p.frame_id != id).collect();
        // Remap edge patch indices under the patch removal.
        let mut remap = vec![usize::MAX; self.patches.len()];
        let mut next = 0;
        for (idx, keep_it) in keep.iter().enumerate() {
            if *keep_it {
                remap[idx] = next;
                next += 1;
            }
        }
        self.edges.retain_mut(|e| {
            if e.target_frame == id || remap[e.patch] == usize::MAX {
                return false;
            }
            e.patch = remap[e.patch];
            true
        });
        let mut iter = keep.iter();
        self.patches.retain(|_| *iter.next().unwrap());
        self.frames.retain(|f| f.id != id);
    }

    /// Connects every patch to all frames within `radius` window positions of
    /// its anchor (excluding the anchor itself). Existing edges are kept.
    pub fn build_edges(&mut self, radius: usize) {
        let mut existing: BTreeSet<(usize, FrameId)> = self
            .edges
            .iter()
            .map(|e| (e.patch, e.target_frame))
            .collect();
        for (patch_idx, patch) in self.patches.iter().enumerate() {
            let Some(anchor_pos) = self.frame_position(patch.frame_id) else {
                continue;
            };
            for (pos, frame) in self.frames.iter().enumerate() {
                if pos == anchor_pos || anchor_pos.abs_diff(pos) > radius {
                    continue;
                }
                if existing.insert((patch_idx, frame.id)) {
                    self.edges.push(GraphEdge {
                        patch: patch_idx,
                        target_frame: frame.id,
                        target_pixel: None,
                        confidence: Vector2::zeros(),
                    });
                }
            }
        }
    }

    /// Reprojection of a patch center into the edge's target frame under the
    /// current poses and depths.
    pub fn current_reprojection(
        &self,
        edge: &GraphEdge,
        intr: &Intrinsics,
    ) -> Option<Vector2<f64>> {
        let patch = &self.patches[edge.patch];
        let source = self.frame(patch.frame_id)?;
        let target = self.frame(edge.target_frame)?;
        reproject_pixel(
            &patch.center(),
            patch.inv_depth,
            &source.pose,
            &target.pose,
            intr,
        )
    }
}

/// Read-only per-edge view handed to correspondence providers.
#[derive(Clone, Debug)]
pub struct EdgeView {
    pub edge_index: usize,
    pub patch_frame: FrameId,
    pub patch_index_in_frame: usize,
    pub center: Vector2<f64>,
    pub inv_depth: f64,
    pub target_frame: FrameId,
    pub current_reprojection: Option<Vector2<f64>>,
}

/// Snapshot of the graph offered to a provider: window frames with images
/// and poses, plus every edge awaiting a correspondence.
pub struct GraphView<'a> {
    pub frames: &'a [GraphFrame],
    pub intrinsics: &'a Intrinsics,
    pub edges: Vec<EdgeView>,
}

/// Predicted correction and confidence for one edge.
#[derive(Clone, Copy, Debug)]
pub struct EdgeTarget {
    /// Correction added to the current center reprojection.
    pub correction: Vector2<f64>,
    /// Per-axis weights, >= 0; zero disables the edge.
    pub confidence: Vector2<f64>,
}

/// Contract for the module that predicts per-edge reprojection corrections
/// with confidences (a learned flow network in production, an analytic
/// oracle in tests).
pub trait CorrespondenceProvider: Send {
    fn predict(&mut self, view: &GraphView<'_>) -> Result<Vec<EdgeTarget>, ProviderError>;
}

/// Contract check on provider outputs; violations count as provider failure.
fn validate_targets(targets: &[EdgeTarget], expected: usize) -> Result<(), ProviderError> {
    if targets.len() != expected {
        return Err(ProviderError(format!(
            "provider returned {} targets for {} edges",
            targets.len(),
            expected
        )));
    }
    for (k, t) in targets.iter().enumerate() {
        if !(t.correction.x.is_finite() && t.correction.y.is_finite()) {
            return Err(ProviderError(format!("non-finite correction on edge {k}")));
        }
        if !(t.confidence.x >= 0.0 && t.confidence.y >= 0.0)
            || !(t.confidence.x.is_finite() && t.confidence.y.is_finite())
        {
            return Err(ProviderError(format!("invalid confidence on edge {k}")));
        }
    }
    Ok(())
}

/// Samples `count` axis-aligned s x s patches with uniformly random integer
/// centers keeping a half-patch margin from the borders. Deterministic for a
/// given seed.
pub fn sample_patches(
    image: &ImageRgb,
    count: usize,
    size: usize,
    frame_id: FrameId,
    inv_depth: f64,
    seed: u64,
) -> Result<Vec<Patch>, TrackerError> {
    if count == 0 {
        return Err(TrackerError::ZeroPatches);
    }
    if image.width < size || image.height < size {
        return Err(TrackerError::ImageTooSmall {
            width: image.width,
            height: image.height,
            size,
        });
    }
    let half = (size - 1) / 2;
    let lo_u = half;
    let hi_u = image.width - 1 - (size - 1 - half);
    let lo_v = half;
    let hi_v = image.height - 1 - (size - 1 - half);
    let mut rng = StdRng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let cu = rng.random_range(lo_u..=hi_u) as f64;
            let cv = rng.random_range(lo_v..=hi_v) as f64;
            Patch::grid(frame_id, cu, cv, size, inv_depth)
        })
        .collect())
}

/// Sliding-window size and keyframe retention policy.
#[derive(Clone, Copy, Debug)]
pub struct SlidingWindow {
    pub max_keyframes: usize,
    pub flow_threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyframeDecision {
    Keep,
    RemoveFourthRecent,
}

/// The fourth-most-recent keyframe is kept only when its mean optical flow to
/// its predecessor is at least the threshold; the three most recent frames
/// are never candidates for removal.
pub fn keyframe_decision(window: &SlidingWindow, flow_to_predecessor: f64) -> KeyframeDecision {
    if flow_to_predecessor < window.flow_threshold {
        KeyframeDecision::RemoveFourthRecent
    } else {
        KeyframeDecision::Keep
    }
}

#[derive(Clone, Debug)]
pub struct TrackerConfig {
    pub patches_per_frame: usize,
    pub patch_size: usize,
    pub max_keyframes: usize,
    /// Temporal edge radius in window positions; patches connect to every
    /// frame within this distance.
    pub edge_radius: usize,
    pub flow_threshold: f64,
    pub ba_iterations: usize,
    pub ba: ba::BaConfig,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            patches_per_frame: 96,
            patch_size: 3,
            max_keyframes: 10,
            edge_radius: 10,
            flow_threshold: 16.0,
            ba_iterations: 6,
            ba: ba::BaConfig::default(),
            seed: 0,
        }
    }
}

/// Immutable snapshot handed downstream when a keyframe is secured.
#[derive(Clone, Debug)]
pub struct SecuredKeyframe {
    pub frame_id: FrameId,
    pub timestamp: f64,
    pub image: Arc<ImageRgb>,
    pub pose: Pose,
    /// Patch centers with their optimized depths (one sample per patch).
    pub sparse_depths: Vec<(Vector2<f64>, f64)>,
    /// Current pose estimates of the whole window at emission time.
    pub window_poses: Vec<(FrameId, Pose)>,
}

/// Per-frame problem-size and timing statistics.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct TrackStats {
    pub window_len: usize,
    pub patch_count: usize,
    pub edge_count: usize,
    pub ba_final_cost: f64,
    pub latency_ms: f64,
}

#[derive(Debug)]
pub struct TrackOutput {
    pub frame_id: FrameId,
    pub pose: Pose,
    /// Set when this call secured (and emitted) a keyframe.
    pub secured: Option<SecuredKeyframe>,
    /// True when the provider failed and the frame was dropped.
    pub dropped: bool,
    pub stats: TrackStats,
}

/// The tracking front-end. Owns the patch graph; one instance per stream.
pub struct Tracker {
    intr: Intrinsics,
    cfg: TrackerConfig,
    graph: PatchGraph,
    provider: Box<dyn CorrespondenceProvider>,
    secured: BTreeSet<FrameId>,
    /// Final pose estimates of frames that left the window.
    finalized: Vec<(f64, FrameId, Pose)>,
    next_frame: u64,
    debug_writer: Option<Box<dyn Write + Send>>,
}

impl Tracker {
    pub fn new(
        intr: Intrinsics,
        cfg: TrackerConfig,
        provider: Box<dyn CorrespondenceProvider>,
    ) -> Self {
        Self {
            intr,
            cfg,
            graph: PatchGraph::default(),
            provider,
            secured: BTreeSet::new(),
            finalized: Vec::new(),
            next_frame: 0,
            debug_writer: None,
        }
    }

    /// Installs a per-frame patch-graph dump sink (line-delimited JSON).
    pub fn set_debug_writer(&mut self, writer: Box<dyn Write + Send>) {
        self.debug_writer = Some(writer);
    }

    pub fn graph(&self) -> &PatchGraph {
        &self.graph
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intr
    }

    /// Full trajectory so far: finalized frames followed by the live window.
    pub fn trajectory(&self) -> Vec<(f64, FrameId, Pose)> {
        let mut out = self.finalized.clone();
        for frame in &self.graph.frames {
            out.push((frame.timestamp, frame.id, frame.pose));
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }

    fn predicted_pose(&self) -> Pose {
        let n = self.graph.frames.len();
        if n >= 2 {
            let last = &self.graph.frames[n - 1].pose;
            let prev = &self.graph.frames[n - 2].pose;
            // Constant-velocity model: repeat the last relative motion.
            last.compose(&prev.inverse()).compose(last)
        } else if n == 1 {
            self.graph.frames[0].pose
        } else {
            Pose::identity()
        }
    }

    /// Mean patch-center optical flow of `frame` relative to `reference`
    /// under current poses and depths. Patches without a valid reprojection
    /// are skipped; with no valid patch at all the flow is +inf.
    fn mean_flow(&self, frame: FrameId, reference: FrameId) -> f64 {
        let (Some(src), Some(dst)) = (self.graph.frame(frame), self.graph.frame(reference)) else {
            return f64::INFINITY;
        };
        let mut total = 0.0;
        let mut count = 0;
        for (_, patch) in self.graph.patches_of(frame) {
            let center = patch.center();
            if let Some(reproj) =
                reproject_pixel(&center, patch.inv_depth, &src.pose, &dst.pose, &self.intr)
            {
                total += (reproj - center).norm();
                count += 1;
            }
        }
        if count == 0 {
            f64::INFINITY
        } else {
            total / count as f64
        }
    }

    fn run_provider(&mut self) -> Result<Vec<EdgeTarget>, ProviderError> {
        let edges: Vec<EdgeView> = self
            .graph
            .edges
            .iter()
            .enumerate()
            .map(|(edge_index, e)| {
                let patch = &self.graph.patches[e.patch];
                let patch_index_in_frame = self
                    .graph
                    .patches_of(patch.frame_id)
                    .position(|(idx, _)| idx == e.patch)
                    .unwrap_or(0);
                EdgeView {
                    edge_index,
                    patch_frame: patch.frame_id,
                    patch_index_in_frame,
                    center: patch.center(),
                    inv_depth: patch.inv_depth,
                    target_frame: e.target_frame,
                    current_reprojection: self.graph.current_reprojection(e, &self.intr),
                }
            })
            .collect();
        let view = GraphView {
            frames: &self.graph.frames,
            intrinsics: &self.intr,
            edges,
        };
        let targets = self.provider.predict(&view)?;
        validate_targets(&targets, view.edges.len())?;
        Ok(targets)
    }

    fn emit_secured(&self, frame_id: FrameId) -> SecuredKeyframe {
        let frame = self.graph.frame(frame_id).expect("secured frame in window");
        SecuredKeyframe {
            frame_id,
            timestamp: frame.timestamp,
            image: Arc::clone(&frame.image),
            pose: frame.pose,
            sparse_depths: self
                .graph
                .patches_of(frame_id)
                .map(|(_, p)| (p.center(), p.depth()))
                .collect(),
            window_poses: self
                .graph
                .frames
                .iter()
                .map(|f| (f.id, f.pose))
                .collect(),
        }
    }

    fn dump_debug(&mut self, frame_id: FrameId, cost: f64) {
        let Some(writer) = self.debug_writer.as_mut() else {
            return;
        };
        let edges: Vec<serde_json::Value> = self
            .graph
            .edges
            .iter()
            .map(|e| {
                let residual = self
                    .graph
                    .current_reprojection(e, &self.intr)
                    .zip(e.target_pixel)
                    .map(|(r, t)| [r.x - t.x, r.y - t.y]);
                serde_json::json!({
                    "patch": e.patch,
                    "source": self.graph.patches[e.patch].frame_id.0,
                    "target": e.target_frame.0,
                    "residual": residual,
                    "confidence": [e.confidence.x, e.confidence.y],
                })
            })
            .collect();
        let record = serde_json::json!({
            "frame": frame_id.0,
            "window": self.graph.frames.iter().map(|f| f.id.0).collect::<Vec<_>>(),
            "cost": cost,
            "edges": edges,
        });
        let _ = writeln!(writer, "{record}");
    }

    /// Ingests one frame: samples patches, extends the graph, predicts
    /// correspondences, bundle-adjusts the window, and applies the keyframe
    /// retention policy. Securing the fourth-most-recent keyframe emits it
    /// exactly once.
    pub fn track_frame(
        &mut self,
        image: Arc<ImageRgb>,
        timestamp: f64,
    ) -> Result<TrackOutput, TrackerError> {
        let started = Instant::now();
        let frame_id = FrameId(self.next_frame);

        let inv_depth_init = self.graph.median_inv_depth().unwrap_or(1.0);
        let patch_seed = self.cfg.seed.wrapping_mul(0x9e3779b97f4a7c15) ^ frame_id.0;
        let patches = sample_patches(
            &image,
            self.cfg.patches_per_frame,
            self.cfg.patch_size,
            frame_id,
            inv_depth_init,
            patch_seed,
        )?;

        let pose = self.predicted_pose();
        self.graph.frames.push(GraphFrame {
            id: frame_id,
            timestamp,
            pose,
            image,
        });
        self.graph.patches.extend(patches);
        self.graph.edges.clear();
        self.graph.build_edges(self.cfg.edge_radius);

        match self.run_provider() {
            Ok(targets) => {
                // Targets are anchored at the prediction-time reprojection.
                for k in 0..self.graph.edges.len() {
                    let reproj = self.graph.current_reprojection(&self.graph.edges[k], &self.intr);
                    let edge = &mut self.graph.edges[k];
                    edge.target_pixel = reproj.map(|r| r + targets[k].correction);
                    edge.confidence = if edge.target_pixel.is_some() {
                        targets[k].confidence
                    } else {
                        Vector2::zeros()
                    };
                }
            }
            Err(err) => {
                // Contract: drop the frame, leave the rest of the state as
                // it was.
                eprintln!("warning: dropping frame {frame_id}: {err}");
                self.graph.remove_frame(frame_id);
                self.next_frame += 1;
                let stats = TrackStats {
                    window_len: self.graph.frames.len(),
                    patch_count: self.graph.patches.len(),
                    edge_count: self.graph.edges.len(),
                    ba_final_cost: f64::NAN,
                    latency_ms: started.elapsed().as_secs_f64() * 1e3,
                };
                return Ok(TrackOutput {
                    frame_id,
                    pose,
                    secured: None,
                    dropped: true,
                    stats,
                });
            }
        }

        let mut ba_cost = 0.0;
        if self.graph.frames.len() >= 2 {
            let report = ba::ba_step(
                &mut self.graph,
                &self.intr,
                &ba::BaOptions {
                    iterations: self.cfg.ba_iterations,
                    frozen_frames: 1,
                    config: self.cfg.ba,
                },
            )?;
            ba_cost = report.final_cost;
        }

        // Keyframe retention: decide on the fourth-most-recent frame.
        let mut secured_out = None;
        if self.graph.frames.len() >= 4 {
            let fourth_pos = self.graph.frames.len() - 4;
            let fourth = self.graph.frames[fourth_pos].id;
            let flow = if fourth_pos == 0 {
                f64::INFINITY
            } else {
                self.mean_flow(fourth, self.graph.frames[fourth_pos - 1].id)
            };
            let window = SlidingWindow {
                max_keyframes: self.cfg.max_keyframes,
                flow_threshold: self.cfg.flow_threshold,
            };
            match keyframe_decision(&window, flow) {
                KeyframeDecision::Keep => {
                    if self.secured.insert(fourth) {
                        secured_out = Some(self.emit_secured(fourth));
                    }
                }
                KeyframeDecision::RemoveFourthRecent => {
                    let frame = self.graph.frame(fourth).expect("fourth in window");
                    self.finalized.push((frame.timestamp, fourth, frame.pose));
                    self.graph.remove_frame(fourth);
                }
            }
        }

        // Window bound: slide out the oldest frames.
        while self.graph.frames.len() > self.cfg.max_keyframes {
            let oldest = self.graph.frames[0].id;
            let frame = &self.graph.frames[0];
            self.finalized.push((frame.timestamp, oldest, frame.pose));
            self.graph.remove_frame(oldest);
        }

        self.dump_debug(frame_id, ba_cost);
        self.next_frame += 1;

        let pose = self
            .graph
            .frame(frame_id)
            .map(|f| f.pose)
            .unwrap_or(pose);
        let stats = TrackStats {
            window_len: self.graph.frames.len(),
            patch_count: self.graph.patches.len(),
            edge_count: self.graph.edges.len(),
            ba_final_cost: ba_cost,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        Ok(TrackOutput {
            frame_id,
            pose,
            secured: secured_out,
            dropped: false,
            stats,
        })
    }

    /// Flushes remaining window poses into the finalized trajectory (call at
    /// stream end).
    pub fn finish(&mut self) {
        let frames: Vec<FrameId> = self.graph.frames.iter().map(|f| f.id).collect();
        for id in frames {
            let frame = self.graph.frame(id).unwrap();
            self.finalized.push((frame.timestamp, id, frame.pose));
            self.graph.remove_frame(id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_patch_on_minimal_image_is_centered() {
        let image = ImageRgb::new(3, 3);
        let patches = sample_patches(&image, 1, 3, FrameId(0), 1.0, 42).unwrap();
        assert_eq!(patches.len(), 1);
        let c = patches[0].center();
        assert_eq!((c.x, c.y), (1.0, 1.0));
        // All nine pixels inside bounds.
        for (&u, &v) in patches[0].pixel_us.iter().zip(&patches[0].pixel_vs) {
            assert!((0.0..3.0).contains(&u) && (0.0..3.0).contains(&v));
        }
    }

    #[test]
    fn sampling_is_deterministic_for_a_seed() {
        let image = ImageRgb::new(64, 48);
        let a = sample_patches(&image, 96, 3, FrameId(3), 1.0, 7).unwrap();
        let b = sample_patches(&image, 96, 3, FrameId(3), 1.0, 7).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.pixel_us, pb.pixel_us);
            assert_eq!(pa.pixel_vs, pb.pixel_vs);
        }
    }

    #[test]
    fn sampling_rejects_too_small_images() {
        let image = ImageRgb::new(2, 5);
        assert!(matches!(
            sample_patches(&image, 4, 3, FrameId(0), 1.0, 0),
            Err(TrackerError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn patch_centers_are_uniform_over_the_valid_region() {
        // Chi-square test against the discrete uniform distribution over
        // valid center positions.
        let image = ImageRgb::new(18, 10);
        let patches = sample_patches(&image, 10_000, 3, FrameId(0), 1.0, 99).unwrap();
        let (w_bins, h_bins) = (16, 8); // valid center range per axis
        let mut counts = vec![0.0_f64; w_bins * h_bins];
        for p in &patches {
            let c = p.center();
            let bu = c.x as usize - 1;
            let bv = c.y as usize - 1;
            counts[bv * w_bins + bu] += 1.0;
        }
        let expected = 10_000.0 / (w_bins * h_bins) as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c - expected).powi(2) / expected)
            .sum();
        // 127 degrees of freedom; the 0.99 quivalue is ~166.99, so chi2 below
        // that accepts uniformity at p > 0.01.
        assert!(chi2 < 166.99, "chi-square statistic too large: {chi2}");
    }

    #[test]
    fn edge_construction_matches_enumeration_oracle() {
        // 5 frames, radius 2, one patch per frame: the patch of frame 2
        // connects to frames {0, 1, 3, 4}.
        let mut graph = PatchGraph::default();
        let image = Arc::new(ImageRgb::new(16, 16));
        for k in 0..5u64 {
            graph.frames.push(GraphFrame {
                id: FrameId(k),
                timestamp: k as f64,
                pose: Pose::identity(),
                image: Arc::clone(&image),
            });
            graph.patches.push(Patch::grid(FrameId(k), 8.0, 8.0, 3, 1.0));
        }
        graph.build_edges(2);
        let of_frame2: Vec<u64> = graph
            .edges
            .iter()
            .filter(|e| graph.patches[e.patch].frame_id == FrameId(2))
            .map(|e| e.target_frame.0)
            .collect();
        assert_eq!(of_frame2, vec![0, 1, 3, 4]);

        // Brute-force enumeration oracle over random configurations.
        for (frames, per_frame, radius) in [(1usize, 3usize, 2usize), (7, 2, 3), (10, 4, 10)] {
            let mut g = PatchGraph::default();
            for k in 0..frames as u64 {
                g.frames.push(GraphFrame {
                    id: FrameId(k),
                    timestamp: k as f64,
                    pose: Pose::identity(),
                    image: Arc::clone(&image),
                });
                for _ in 0..per_frame {
                    g.patches.push(Patch::grid(FrameId(k), 8.0, 8.0, 3, 1.0));
                }
            }
            g.build_edges(radius);
            let mut expected = 0usize;
            for i in 0..frames {
                for j in 0..frames {
                    if i != j && i.abs_diff(j) <= radius {
                        expected += per_frame;
                    }
                }
            }
            assert_eq!(g.edges.len(), expected);
        }
    }

    #[test]
    fn one_frame_has_no_edges() {
        let mut graph = PatchGraph::default();
        let image = Arc::new(ImageRgb::new(16, 16));
        graph.frames.push(GraphFrame {
            id: FrameId(0),
            timestamp: 0.0,
            pose: Pose::identity(),
            image,
        });
        graph.patches.push(Patch::grid(FrameId(0), 8.0, 8.0, 3, 1.0));
        graph.build_edges(3);
        assert!(graph.edges.is_empty());
    }

    #[test]
    fn keyframe_decision_thresholding() {
        let window = SlidingWindow {
            max_keyframes: 10,
            flow_threshold: 16.0,
        };
        assert_eq!(
            keyframe_decision(&window, 16.0 + 1e-9),
            KeyframeDecision::Keep
        );
        assert_eq!(
            keyframe_decision(&window, 16.0),
            KeyframeDecision::Keep
        );
        assert_eq!(
            keyframe_decision(&window, 0.0),
            KeyframeDecision::RemoveFourthRecent
        );
    }

    #[test]
    fn remove_frame_remaps_edges() {
        let mut graph = PatchGraph::default();
        let image = Arc::new(ImageRgb::new(16, 16));
        for k in 0..3u64 {
            graph.frames.push(GraphFrame {
                id: FrameId(k),
                timestamp: k as f64,
                pose: Pose::identity(),
                image: Arc::clone(&image),
            });
            graph.patches.push(Patch::grid(FrameId(k), 8.0, 8.0, 3, 1.0));
        }
        graph.build_edges(2);
        graph.remove_frame(FrameId(1));
        assert_eq!(graph.frames.len(), 2);
        assert_eq!(graph.patches.len(), 2);
        for e in &graph.edges {
            assert!(e.target_frame != FrameId(1));
            let anchor = graph.patches[e.patch].frame_id;
            assert!(anchor != FrameId(1));
            assert!(anchor != e.target_frame);
        }
    }
}
