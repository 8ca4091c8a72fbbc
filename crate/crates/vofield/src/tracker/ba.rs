//! Levenberg-damped Gauss-Newton bundle adjustment over the patch graph.
//!
//! Minimizes the confidence-weighted squared distance between patch-center
//! reprojections and their provider-corrected targets, over all non-frozen
//! window poses and all patch inverse depths. Inverse depths are eliminated
//! with a Schur complement, leaving a small dense pose system.

use nalgebra::{DMatrix, DVector, Matrix2x6, Vector2, Vector6};
use thiserror::Error;

use crate::geometry::{reprojection_with_jacobians, FrameId, Intrinsics, Twist};

use super::PatchGraph;

#[derive(Debug, Error)]
pub enum BaError {
    #[error(
        "non-finite residual on edge (patch {patch_index} of frame {patch_frame} -> frame {target_frame})"
    )]
    NonFiniteResidual {
        patch_frame: FrameId,
        patch_index: usize,
        target_frame: FrameId,
    },
    #[error("bundle adjustment requires at least one frozen frame")]
    NoGaugeFrame,
}

#[derive(Clone, Copy, Debug)]
pub struct BaConfig {
    pub init_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub damping_cap: f64,
    pub min_inv_depth: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            init_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 0.5,
            damping_cap: 1e4,
            min_inv_depth: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BaOptions {
    pub iterations: usize,
    /// Number of leading window frames whose poses stay fixed (gauge).
    pub frozen_frames: usize,
    pub config: BaConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaStatus {
    Converged,
    MaxIterations,
    /// Damping hit its cap without an acceptable step.
    Stalled,
}

#[derive(Clone, Copy, Debug)]
pub struct BaReport {
    pub status: BaStatus,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
}

/// Linearization of the current graph: damped normal equations in block form
/// with poses first, one inverse-depth variable per patch.
struct NormalEquations {
    /// Pose-pose block, (6 * free_poses)^2.
    h_pose: DMatrix<f64>,
    b_pose: DVector<f64>,
    /// Diagonal depth block, one entry per patch.
    h_depth: Vec<f64>,
    b_depth: Vec<f64>,
    /// Per patch: list of (pose variable index, 6x1 coupling block).
    couplings: Vec<Vec<(usize, Vector6<f64>)>>,
    free_poses: usize,
}

fn edge_cost(weighted: &Vector2<f64>, residual: &Vector2<f64>) -> f64 {
    weighted.x * residual.x * residual.x + weighted.y * residual.y * residual.y
}

/// Total weighted reprojection cost of the graph under its current state.
pub fn graph_cost(graph: &PatchGraph, intr: &Intrinsics) -> Result<f64, BaError> {
    let mut cost = 0.0;
    for edge in &graph.edges {
        let Some(target) = edge.target_pixel else {
            continue;
        };
        if edge.confidence.x <= 0.0 && edge.confidence.y <= 0.0 {
            continue;
        }
        let Some(reproj) = graph.current_reprojection(edge, intr) else {
            continue;
        };
        let residual = reproj - target;
        if !residual.x.is_finite() || !residual.y.is_finite() {
            let patch = &graph.patches[edge.patch];
            return Err(BaError::NonFiniteResidual {
                patch_frame: patch.frame_id,
                patch_index: edge.patch,
                target_frame: edge.target_frame,
            });
        }
        cost += edge_cost(&edge.confidence, &residual);
    }
    Ok(cost)
}

fn assemble(
    graph: &PatchGraph,
    intr: &Intrinsics,
    frozen: usize,
) -> Result<NormalEquations, BaError> {
    let pose_count = graph.frames.len();
    let free_poses = pose_count.saturating_sub(frozen);
    let dim = free_poses * 6;
    let mut eq = NormalEquations {
        h_pose: DMatrix::zeros(dim, dim),
        b_pose: DVector::zeros(dim),
        h_depth: vec![0.0; graph.patches.len()],
        b_depth: vec![0.0; graph.patches.len()],
        couplings: vec![Vec::new(); graph.patches.len()],
        free_poses,
    };

    for edge in &graph.edges {
        let Some(target) = edge.target_pixel else {
            continue;
        };
        let weight = edge.confidence;
        if weight.x <= 0.0 && weight.y <= 0.0 {
            continue;
        }
        let patch = &graph.patches[edge.patch];
        let source_pos = graph.frame_position(patch.frame_id).expect("anchor in window");
        let target_pos = graph
            .frame_position(edge.target_frame)
            .expect("target in window");
        let source_pose = graph.frames[source_pos].pose;
        let target_pose = graph.frames[target_pos].pose;
        let Some(jac) = reprojection_with_jacobians(
            &patch.center(),
            patch.inv_depth,
            &source_pose,
            &target_pose,
            intr,
        ) else {
            continue;
        };
        let residual = jac.pixel - target;
        if !residual.x.is_finite() || !residual.y.is_finite() {
            return Err(BaError::NonFiniteResidual {
                patch_frame: patch.frame_id,
                patch_index: edge.patch,
                target_frame: edge.target_frame,
            });
        }

        // Weighted blocks; W is the diagonal confidence matrix.
        let apply_w = |j: &Matrix2x6<f64>| {
            let mut out = *j;
            out.row_mut(0).scale_mut(weight.x);
            out.row_mut(1).scale_mut(weight.y);
            out
        };
        let weighted_residual = Vector2::new(weight.x * residual.x, weight.y * residual.y);
        let jd = jac.wrt_inv_depth;
        let wjd = Vector2::new(weight.x * jd.x, weight.y * jd.y);

        let mut pose_blocks: Vec<(usize, Matrix2x6<f64>, Matrix2x6<f64>)> = Vec::new();
        if source_pos >= frozen {
            pose_blocks.push((source_pos - frozen, jac.wrt_pose_i, apply_w(&jac.wrt_pose_i)));
        }
        if target_pos >= frozen {
            pose_blocks.push((target_pos - frozen, jac.wrt_pose_j, apply_w(&jac.wrt_pose_j)));
        }

        for (var_a, j_a, wj_a) in &pose_blocks {
            let base_a = var_a * 6;
            eq.b_pose
                .rows_mut(base_a, 6)
                .sub_assign(&(j_a.transpose() * weighted_residual));
            for (var_b, j_b, _) in &pose_blocks {
                let base_b = var_b * 6;
                let block = wj_a.transpose() * j_b;
                for r in 0..6 {
                    for c in 0..6 {
                        eq.h_pose[(base_a + r, base_b + c)] += block[(r, c)];
                    }
                }
            }
            // Pose-depth coupling.
            let coupling = wj_a.transpose() * jd;
            push_coupling(&mut eq.couplings[edge.patch], *var_a, coupling);
        }

        eq.h_depth[edge.patch] += jd.dot(&wjd);
        eq.b_depth[edge.patch] -= jd.dot(&weighted_residual);
    }

    Ok(eq)
}

fn push_coupling(list: &mut Vec<(usize, Vector6<f64>)>, var: usize, block: Vector6<f64>) {
    if let Some(entry) = list.iter_mut().find(|(v, _)| *v == var) {
        entry.1 += block;
    } else {
        list.push((var, block));
    }
}

use std::ops::SubAssign;

/// Solves the damped system by eliminating depths with a Schur complement.
/// Returns `(pose deltas, depth deltas)` or `None` when the reduced system is
/// not positive definite.
fn solve_schur(eq: &NormalEquations, damping: f64) -> Option<(DVector<f64>, Vec<f64>)> {
    let dim = eq.free_poses * 6;
    let mut reduced = eq.h_pose.clone();
    let mut rhs = eq.b_pose.clone();
    // Multiplicative Levenberg damping on all diagonals, with a small
    // absolute floor so empty blocks stay solvable.
    for k in 0..dim {
        reduced[(k, k)] += damping * reduced[(k, k)].max(1e-8);
    }

    let damped_depth: Vec<f64> = eq
        .h_depth
        .iter()
        .map(|&h| if h > 0.0 { h + damping * h } else { 0.0 })
        .collect();

    for (patch, links) in eq.couplings.iter().enumerate() {
        let h = damped_depth[patch];
        if h <= 0.0 {
            continue;
        }
        let inv_h = 1.0 / h;
        for (var_a, block_a) in links {
            let base_a = var_a * 6;
            rhs.rows_mut(base_a, 6)
                .sub_assign(&(block_a * (eq.b_depth[patch] * inv_h)));
            for (var_b, block_b) in links {
                let base_b = var_b * 6;
                for r in 0..6 {
                    for c in 0..6 {
                        reduced[(base_a + r, base_b + c)] -= block_a[r] * inv_h * block_b[c];
                    }
                }
            }
        }
    }

    let chol = reduced.cholesky()?;
    let pose_delta = chol.solve(&rhs);
    if pose_delta.iter().any(|v| !v.is_finite()) {
        return None;
    }

    let mut depth_delta = vec![0.0; eq.h_depth.len()];
    for (patch, links) in eq.couplings.iter().enumerate() {
        let h = damped_depth[patch];
        if h <= 0.0 {
            continue;
        }
        let mut coupled = 0.0;
        for (var, block) in links {
            let base = var * 6;
            for r in 0..6 {
                coupled += block[r] * pose_delta[base + r];
            }
        }
        depth_delta[patch] = (eq.b_depth[patch] - coupled) / h;
    }

    Some((pose_delta, depth_delta))
}

/// Test oracle: solve the full damped normal equations (poses and depths
/// jointly) as one dense system, without the Schur elimination.
#[cfg(test)]
fn solve_dense(eq: &NormalEquations, damping: f64) -> Option<(DVector<f64>, Vec<f64>)> {
    let pose_dim = eq.free_poses * 6;
    let active: Vec<usize> = (0..eq.h_depth.len())
        .filter(|&k| eq.h_depth[k] > 0.0)
        .collect();
    let dim = pose_dim + active.len();
    let mut h = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    h.view_mut((0, 0), (pose_dim, pose_dim)).copy_from(&eq.h_pose);
    b.rows_mut(0, pose_dim).copy_from(&eq.b_pose);
    for (slot, &patch) in active.iter().enumerate() {
        let k = pose_dim + slot;
        h[(k, k)] = eq.h_depth[patch];
        b[k] = eq.b_depth[patch];
        for (var, block) in &eq.couplings[patch] {
            let base = var * 6;
            for r in 0..6 {
                h[(base + r, k)] += block[r];
                h[(k, base + r)] += block[r];
            }
        }
    }
    for k in 0..pose_dim {
        h[(k, k)] += damping * h[(k, k)].max(1e-8);
    }
    for slot in 0..active.len() {
        let k = pose_dim + slot;
        h[(k, k)] += damping * h[(k, k)];
    }
    let solution = h.cholesky()?.solve(&b);
    let mut depth_delta = vec![0.0; eq.h_depth.len()];
    for (slot, &patch) in active.iter().enumerate() {
        depth_delta[patch] = solution[pose_dim + slot];
    }
    Some((solution.rows(0, pose_dim).into_owned(), depth_delta))
}

struct Snapshot {
    poses: Vec<crate::geometry::Pose>,
    inv_depths: Vec<f64>,
}

fn snapshot(graph: &PatchGraph) -> Snapshot {
    Snapshot {
        poses: graph.frames.iter().map(|f| f.pose).collect(),
        inv_depths: graph.patches.iter().map(|p| p.inv_depth).collect(),
    }
}

fn restore(graph: &mut PatchGraph, snap: &Snapshot) {
    for (frame, pose) in graph.frames.iter_mut().zip(&snap.poses) {
        frame.pose = *pose;
    }
    for (patch, &d) in graph.patches.iter_mut().zip(&snap.inv_depths) {
        patch.inv_depth = d;
    }
}

fn apply_step(
    graph: &mut PatchGraph,
    pose_delta: &DVector<f64>,
    depth_delta: &[f64],
    frozen: usize,
    min_inv_depth: f64,
) {
    for (var, frame) in graph.frames.iter_mut().skip(frozen).enumerate() {
        let base = var * 6;
        let twist = Twist::from_iterator((0..6).map(|k| pose_delta[base + k]));
        frame.pose = crate::geometry::se3_exp(&twist)
            .expect("finite BA step")
            .compose(&frame.pose);
    }
    for (patch, &dd) in graph.patches.iter_mut().zip(depth_delta) {
        patch.inv_depth = (patch.inv_depth + dd).max(min_inv_depth);
    }
}

/// Runs up to `iterations` damped Gauss-Newton rounds. Every accepted step
/// lowers the cost; rejected steps increase the damping until the cap, at
/// which point the solve reports [`BaStatus::Stalled`].
pub fn ba_step(
    graph: &mut PatchGraph,
    intr: &Intrinsics,
    opts: &BaOptions,
) -> Result<BaReport, BaError> {
    if opts.frozen_frames == 0 {
        return Err(BaError::NoGaugeFrame);
    }
    let cfg = opts.config;
    let mut damping = cfg.init_damping;
    let initial_cost = graph_cost(graph, intr)?;
    let mut cost = initial_cost;
    let mut accepted_steps = 0;
    let mut status = BaStatus::MaxIterations;

    for iteration in 0..opts.iterations {
        let eq = assemble(graph, intr, opts.frozen_frames)?;
        loop {
            let Some((pose_delta, depth_delta)) = solve_schur(&eq, damping) else {
                damping *= cfg.damping_increase;
                if damping > cfg.damping_cap {
                    return Ok(BaReport {
                        status: BaStatus::Stalled,
                        initial_cost,
                        final_cost: cost,
                        iterations: iteration,
                        accepted_steps,
                    });
                }
                continue;
            };
            let snap = snapshot(graph);
            apply_step(
                graph,
                &pose_delta,
                &depth_delta,
                opts.frozen_frames,
                cfg.min_inv_depth,
            );
            let new_cost = graph_cost(graph, intr)?;
            if new_cost <= cost {
                let step_norm = pose_delta.norm();
                cost = new_cost;
                accepted_steps += 1;
                damping = (damping * cfg.damping_decrease).max(1e-10);
                if step_norm < 1e-12 || cost < 1e-24 {
                    status = BaStatus::Converged;
                }
                break;
            }
            restore(graph, &snap);
            damping *= cfg.damping_increase;
            if damping > cfg.damping_cap {
                return Ok(BaReport {
                    status: BaStatus::Stalled,
                    initial_cost,
                    final_cost: cost,
                    iterations: iteration,
                    accepted_steps,
                });
            }
        }
        if status == BaStatus::Converged {
            return Ok(BaReport {
                status,
                initial_cost,
                final_cost: cost,
                iterations: iteration + 1,
                accepted_steps,
            });
        }
    }

    Ok(BaReport {
        status,
        initial_cost,
        final_cost: cost,
        iterations: opts.iterations,
        accepted_steps,
    })
}
