//! Analytic ground-truth scenes and oracle providers.
//!
//! Scenes are built from textured primitives with exact ray intersections,
//! so every pixel has a closed-form depth and normal. The oracles in
//! [`oracles`] stand in for learned correspondence and monocular-prior
//! networks, with configurable noise, which makes every downstream stage
//! quantitatively verifiable.

pub mod oracles;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{project, unproject, Intrinsics, Pose};
use crate::raster::{DepthMap, ImageRgb, NormalMap};

/// Axis-aligned bounding box in scene units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    pub fn diagonal(&self) -> f64 {
        Vector3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
        .norm()
    }

    /// Grows the box by `fraction` of its extent on every side.
    pub fn inflated(&self, fraction: f64) -> Aabb {
        let mut out = *self;
        for k in 0..3 {
            let pad = (self.max[k] - self.min[k]) * fraction;
            out.min[k] -= pad;
            out.max[k] += pad;
        }
        out
    }

    /// Ray-box intersection returning the `(t_entry, t_exit)` interval.
    pub fn clip_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k].abs() < 1e-12 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let (mut near, mut far) = ((self.min[k] - origin[k]) * inv, (self.max[k] - origin[k]) * inv);
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Procedural view-independent albedo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Texture {
    Solid { color: [f64; 3] },
    Checker { scale: f64, a: [f64; 3], b: [f64; 3] },
    /// Smooth per-axis sinusoidal color ramp; gives dense photometric
    /// gradients without hard edges.
    Waves { scale: f64 },
}

impl Texture {
    pub fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        match self {
            Texture::Solid { color } => *color,
            Texture::Checker { scale, a, b } => {
                let parity = (p.x * scale).floor() + (p.y * scale).floor() + (p.z * scale).floor();
                if (parity as i64).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Waves { scale } => [
                0.5 + 0.35 * (p.x * scale).sin(),
                0.5 + 0.35 * (p.y * scale * 1.3 + 1.0).sin(),
                0.5 + 0.35 * (p.z * scale * 0.7 + 2.0).sin(),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        texture: Texture,
    },
    /// Solid axis-aligned box seen from outside.
    Block {
        min: [f64; 3],
        max: [f64; 3],
        texture: Texture,
    },
    /// Inward-facing axis-aligned box: the camera lives inside and sees the
    /// interior walls.
    Room {
        min: [f64; 3],
        max: [f64; 3],
        texture: Texture,
    },
    /// Infinite plane through `point` with unit `normal`.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        texture: Texture,
    },
}

/// A ray-primitive intersection.
#[derive(Clone, Debug)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    /// Geometric normal in world coordinates (not yet oriented toward the
    /// viewer).
    pub normal: Vector3<f64>,
    pub albedo: [f64; 3],
}

const RAY_EPS: f64 = 1e-9;

impl Primitive {
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        match self {
            Primitive::Sphere {
                center,
                radius,
                texture,
            } => {
                let c = Vector3::from(*center);
                let oc = origin - c;
                let b = oc.dot(dir);
                let disc = b * b - (oc.norm_squared() - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let sqrt_disc = disc.sqrt();
                let t = if -b - sqrt_disc > RAY_EPS {
                    -b - sqrt_disc
                } else if -b + sqrt_disc > RAY_EPS {
                    -b + sqrt_disc
                } else {
                    return None;
                };
                let point = origin + dir * t;
                Some(Hit {
                    t,
                    point,
                    normal: (point - c) / *radius,
                    albedo: texture.albedo(&point),
                })
            }
            Primitive::Block { min, max, texture } => {
                let aabb = Aabb::new(*min, *max);
                let (t0, t1) = aabb.clip_ray(origin, dir)?;
                let t = if t0 > RAY_EPS {
                    t0
                } else if t1 > RAY_EPS {
                    t1
                } else {
                    return None;
                };
                let point = origin + dir * t;
                Some(Hit {
                    t,
                    point,
                    normal: box_face_normal(&aabb, &point),
                    albedo: texture.albedo(&point),
                })
            }
            Primitive::Room { min, max, texture } => {
                let aabb = Aabb::new(*min, *max);
                let (_, t1) = aabb.clip_ray(origin, dir)?;
                if t1 <= RAY_EPS {
                    return None;
                }
                let point = origin + dir * t1;
                Some(Hit {
                    t: t1,
                    point,
                    // Interior walls face inward.
                    normal: -box_face_normal(&aabb, &point),
                    albedo: texture.albedo(&point),
                })
            }
            Primitive::Plane {
                point,
                normal,
                texture,
            } => {
                let n = Vector3::from(*normal).normalize();
                let denom = dir.dot(&n);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (Vector3::from(*point) - origin).dot(&n) / denom;
                if t <= RAY_EPS {
                    return None;
                }
                let hit_point = origin + dir * t;
                Some(Hit {
                    t,
                    point: hit_point,
                    normal: n,
                    albedo: texture.albedo(&hit_point),
                })
            }
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                (p - Vector3::from(*center)).norm() < *radius
            }
            Primitive::Block { min, max, .. } => Aabb::new(*min, *max).contains(p),
            // The room interior is free space, not solid.
            Primitive::Room { .. } | Primitive::Plane { .. } => false,
        }
    }
}

fn box_face_normal(aabb: &Aabb, point: &Vector3<f64>) -> Vector3<f64> {
    // Outward normal of the face closest to `point`.
    let mut best_axis = 0;
    let mut best_sign = 1.0;
    let mut best_dist = f64::INFINITY;
    for k in 0..3 {
        let to_min = (point[k] - aabb.min[k]).abs();
        let to_max = (point[k] - aabb.max[k]).abs();
        if to_min < best_dist {
            best_dist = to_min;
            best_axis = k;
            best_sign = -1.0;
        }
        if to_max < best_dist {
            best_dist = to_max;
            best_axis = k;
            best_sign = 1.0;
        }
    }
    let mut n = Vector3::zeros();
    n[best_axis] = best_sign;
    n
}

/// Camera path generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrajectorySpec {
    /// Circle around `center` at `radius` and height `height`, looking at
    /// `look_at`.
    Orbit {
        center: [f64; 2],
        radius: f64,
        height: f64,
        look_at: [f64; 3],
        frames: usize,
        /// Fraction of a full revolution covered by the path (1.0 = closed
        /// loop).
        revolutions: f64,
    },
    /// Serpentine sweep over a rectangle at fixed height, looking at
    /// `look_at`.
    Lawnmower {
        min: [f64; 2],
        max: [f64; 2],
        height: f64,
        look_at: [f64; 3],
        rows: usize,
        frames_per_row: usize,
    },
}

impl TrajectorySpec {
    pub fn frame_count(&self) -> usize {
        match self {
            TrajectorySpec::Orbit { frames, .. } => *frames,
            TrajectorySpec::Lawnmower {
                rows,
                frames_per_row,
                ..
            } => rows * frames_per_row,
        }
    }

    /// World-to-camera pose of frame `index`.
    pub fn pose(&self, index: usize) -> Pose {
        match self {
            TrajectorySpec::Orbit {
                center,
                radius,
                height,
                look_at,
                frames,
                revolutions,
            } => {
                let angle = 2.0 * std::f64::consts::PI * revolutions * index as f64
                    / (*frames).max(1) as f64;
                let eye = Vector3::new(
                    center[0] + radius * angle.cos(),
                    center[1] + radius * angle.sin(),
                    *height,
                );
                look_at_pose(&eye, &Vector3::from(*look_at))
            }
            TrajectorySpec::Lawnmower {
                min,
                max,
                height,
                look_at,
                rows,
                frames_per_row,
            } => {
                let row = (index / frames_per_row).min(rows.saturating_sub(1));
                let col = index % frames_per_row;
                let ty = if *rows > 1 {
                    row as f64 / (*rows - 1) as f64
                } else {
                    0.5
                };
                let raw_tx = if *frames_per_row > 1 {
                    col as f64 / (*frames_per_row - 1) as f64
                } else {
                    0.5
                };
                let tx = if row % 2 == 0 { raw_tx } else { 1.0 - raw_tx };
                let eye = Vector3::new(
                    min[0] + tx * (max[0] - min[0]),
                    min[1] + ty * (max[1] - min[1]),
                    *height,
                );
                look_at_pose(&eye, &Vector3::from(*look_at))
            }
        }
    }
}

/// World-to-camera pose for a camera at `eye` looking at `target`, world z
/// up, camera convention x-right / y-down / z-forward.
pub fn look_at_pose(eye: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let forward = (target - eye).normalize();
    let up = if forward.z.abs() > 0.999 {
        Vector3::new(0.0, 1.0, 0.0)
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right).normalize();
    let rot = nalgebra::Matrix3::from_rows(&[
        right.transpose(),
        down.transpose(),
        forward.transpose(),
    ]);
    let rotation = nalgebra::UnitQuaternion::from_matrix(&rot);
    let translation = -(rotation * eye);
    Pose::new(rotation, translation)
}

/// A full synthetic scene: geometry, capture trajectory, and the declared
/// scene bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub aabb: Aabb,
    pub primitives: Vec<Primitive>,
    pub trajectory: TrajectorySpec,
    /// Far-plane depth assigned to background pixels.
    pub far_plane: f64,
    /// Adds a fixed-light specular lobe for view-dependence tests.
    #[serde(default)]
    pub glossy: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("camera of frame {0} is inside scene geometry")]
    CameraInsideGeometry(usize),
    #[error("camera of frame {0} leaves the declared scene bound")]
    CameraOutsideBound(usize),
}

impl SceneSpec {
    /// Checks that the whole trajectory stays in free space inside the bound.
    pub fn validate(&self) -> Result<(), SceneError> {
        for index in 0..self.trajectory.frame_count() {
            let center = self.trajectory.pose(index).camera_center();
            if self.primitives.iter().any(|p| p.contains(&center)) {
                return Err(SceneError::CameraInsideGeometry(index));
            }
            if !self.aabb.contains(&center) {
                return Err(SceneError::CameraOutsideBound(index));
            }
        }
        Ok(())
    }

    /// Nearest intersection over all primitives.
    pub fn cast_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for prim in &self.primitives {
            if let Some(hit) = prim.intersect(origin, dir) {
                if best.as_ref().is_none_or(|b| hit.t < b.t) {
                    best = Some(hit);
                }
            }
        }
        best
    }

    /// Ground-truth color of a surface point: unlit albedo, optionally with a
    /// Phong lobe when `glossy` is set.
    fn shade(&self, hit: &Hit, dir: &Vector3<f64>) -> [f64; 3] {
        if !self.glossy {
            return hit.albedo;
        }
        let light = Vector3::new(0.3, -0.5, 0.8).normalize();
        let n = if hit.normal.dot(dir) > 0.0 {
            -hit.normal
        } else {
            hit.normal
        };
        let reflected = light - n * 2.0 * light.dot(&n);
        let spec = reflected.dot(dir).max(0.0).powi(16);
        let mut out = hit.albedo;
        for c in &mut out {
            *c = (*c * 0.8 + 0.2 * spec).clamp(0.0, 1.0);
        }
        out
    }

    /// GT depth (camera-frame z) at one pixel, `None` on background.
    pub fn depth_at(&self, pose: &Pose, intr: &Intrinsics, pixel: &Vector2<f64>) -> Option<f64> {
        let dir_cam = unproject(pixel, 1.0, intr).ok()?.normalize();
        let origin = pose.camera_center();
        let dir = pose.rotate_to_world(&dir_cam);
        let hit = self.cast_ray(&origin, &dir)?;
        Some(pose.transform_point(&hit.point).z)
    }

    /// Casts the ray from `pose` through `pixel` and reports whether `point`
    /// (world coordinates) is the first visible surface along it.
    pub fn is_visible(
        &self,
        pose: &Pose,
        intr: &Intrinsics,
        point: &Vector3<f64>,
        depth_tolerance: f64,
    ) -> bool {
        let cam_point = pose.transform_point(point);
        if cam_point.z <= 0.0 {
            return false;
        }
        let Ok(pixel) = project(&cam_point, intr) else {
            return false;
        };
        if !intr.contains(&pixel) {
            return false;
        }
        match self.depth_at(pose, intr, &pixel) {
            Some(depth) => (depth - cam_point.z).abs() <= depth_tolerance,
            None => false,
        }
    }
}

/// One rendered ground-truth frame.
#[derive(Clone, Debug)]
pub struct GroundTruthFrame {
    pub image: ImageRgb,
    /// Valid everywhere; background pixels carry the far-plane depth.
    pub depth: DepthMap,
    /// Camera-frame unit normals; invalid on background pixels.
    pub normals: NormalMap,
    /// True where the ray escaped the scene.
    pub background: Vec<bool>,
}

/// Renders the exact scene as seen from `pose`: per-pixel analytic
/// intersections, camera-frame normals oriented toward the viewer, and
/// far-plane depth on background pixels.
pub fn render_groundtruth(scene: &SceneSpec, pose: &Pose, intr: &Intrinsics) -> GroundTruthFrame {
    let origin = pose.camera_center();
    let mut image = ImageRgb::new(intr.width, intr.height);
    let mut depth = DepthMap::new_invalid(intr.width, intr.height);
    let mut normals = NormalMap::new_invalid(intr.width, intr.height);
    let mut background = vec![false; intr.width * intr.height];

    for v in 0..intr.height {
        for u in 0..intr.width {
            let pixel = Vector2::new(u as f64, v as f64);
            let dir_cam = unproject(&pixel, 1.0, intr).unwrap().normalize();
            let dir = pose.rotate_to_world(&dir_cam);
            match scene.cast_ray(&origin, &dir) {
                Some(hit) => {
                    let color = scene.shade(&hit, &dir);
                    image.set(u, v, [color[0] as f32, color[1] as f32, color[2] as f32]);
                    depth.set(u, v, pose.transform_point(&hit.point).z);
                    let mut n_cam = pose.rotation() * hit.normal;
                    // Orient toward the viewer: visible surfaces face -z.
                    if n_cam.z > 0.0 {
                        n_cam = -n_cam;
                    }
                    normals.set(u, v, &n_cam);
                }
                None => {
                    depth.set(u, v, scene.far_plane);
                    background[v * intr.width + u] = true;
                }
            }
        }
    }

    GroundTruthFrame {
        image,
        depth,
        normals,
        background,
    }
}

/// The standard desk-scale acceptance scene: a 4 x 4 x 3 textured room with
/// two interior primitives and an interior orbit trajectory.
pub fn box_room(frames: usize) -> SceneSpec {
    SceneSpec {
        aabb: Aabb::new([-2.0, -2.0, 0.0], [2.0, 2.0, 3.0]),
        primitives: vec![
            Primitive::Room {
                min: [-2.0, -2.0, 0.0],
                max: [2.0, 2.0, 3.0],
                texture: Texture::Waves { scale: 3.1 },
            },
            Primitive::Sphere {
                center: [0.8, -0.6, 0.75],
                radius: 0.45,
                texture: Texture::Checker {
                    scale: 6.0,
                    a: [0.9, 0.25, 0.2],
                    b: [0.95, 0.85, 0.3],
                },
            },
            Primitive::Block {
                min: [-1.3, 0.4, 0.0],
                max: [-0.5, 1.2, 0.9],
                texture: Texture::Checker {
                    scale: 4.0,
                    a: [0.2, 0.45, 0.85],
                    b: [0.85, 0.9, 0.95],
                },
            },
        ],
        trajectory: TrajectorySpec::Orbit {
            center: [0.0, 0.0],
            radius: 1.1,
            height: 1.5,
            look_at: [0.0, 0.0, 1.1],
            frames,
            revolutions: 1.0,
        },
        far_plane: 20.0,
        glossy: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_intrinsics() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 64.0, 48.0, 128, 96).unwrap()
    }

    fn plane_scene() -> SceneSpec {
        SceneSpec {
            aabb: Aabb::new([-10.0, -10.0, -1.0], [10.0, 10.0, 5.0]),
            primitives: vec![Primitive::Plane {
                point: [0.0, 0.0, 2.0],
                normal: [0.0, 0.0, 1.0],
                texture: Texture::Solid {
                    color: [0.5, 0.5, 0.5],
                },
            }],
            trajectory: TrajectorySpec::Orbit {
                center: [0.0, 0.0],
                radius: 0.1,
                height: 0.0,
                look_at: [0.0, 0.0, 2.0],
                frames: 1,
                revolutions: 1.0,
            },
            far_plane: 50.0,
            glossy: false,
        }
    }

    #[test]
    fn camera_facing_plane_gives_constant_depth_and_inward_normal() {
        // Camera at origin looking down world +z (identity pose after
        // constructing an axis-aligned look-at).
        let pose = look_at_pose(&Vector3::zeros(), &Vector3::new(0.0, 0.0, 2.0));
        let intr = test_intrinsics();
        let frame = render_groundtruth(&plane_scene(), &pose, &intr);
        // Principal-point pixel: depth exactly 2, normal (0, 0, -1) camera frame.
        assert_relative_eq!(frame.depth.get(64, 48).unwrap(), 2.0, epsilon = 1e-9);
        let n = frame.normals.get(64, 48).unwrap();
        assert_relative_eq!(n, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-9);
        // Depth is a z-depth: constant across the whole image for a fronto-
        // parallel plane.
        for v in 0..intr.height {
            for u in 0..intr.width {
                assert_relative_eq!(frame.depth.get(u, v).unwrap(), 2.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn sphere_silhouette_radius_matches_projective_prediction() {
        let z = 4.0;
        let radius = 0.8;
        let scene = SceneSpec {
            aabb: Aabb::new([-10.0, -10.0, -10.0], [10.0, 10.0, 10.0]),
            primitives: vec![Primitive::Sphere {
                center: [0.0, 0.0, z],
                radius,
                texture: Texture::Solid {
                    color: [1.0, 0.0, 0.0],
                },
            }],
            trajectory: TrajectorySpec::Orbit {
                center: [0.0, 0.0],
                radius: 0.1,
                height: 0.0,
                look_at: [0.0, 0.0, 1.0],
                frames: 1,
                revolutions: 1.0,
            },
            far_plane: 50.0,
            glossy: false,
        };
        let pose = look_at_pose(&Vector3::zeros(), &Vector3::new(0.0, 0.0, z));
        let intr = test_intrinsics();
        let frame = render_groundtruth(&scene, &pose, &intr);
        // Measure silhouette width along the central row.
        let row = 48;
        let hit_cols: Vec<usize> = (0..intr.width)
            .filter(|&u| !frame.background[row * intr.width + u])
            .collect();
        let measured_radius = (hit_cols.len() as f64 - 1.0) / 2.0;
        // The silhouette of a sphere subtends asin(r/z); its projected radius
        // is f * tan(asin(r/z)).
        let expected = intr.fx * (radius / z).asin().tan();
        assert!(
            (measured_radius - expected).abs() <= 1.0,
            "measured {measured_radius}, expected {expected}"
        );
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = box_room(4);
        let intr = test_intrinsics();
        let pose = scene.trajectory.pose(2);
        let a = render_groundtruth(&scene, &pose, &intr);
        let b = render_groundtruth(&scene, &pose, &intr);
        assert_eq!(a.image, b.image);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.normals, b.normals);
    }

    #[test]
    fn box_room_trajectory_is_valid_and_fully_foreground() {
        let scene = box_room(60);
        scene.validate().unwrap();
        let intr = test_intrinsics();
        let frame = render_groundtruth(&scene, &scene.trajectory.pose(0), &intr);
        assert!(frame.background.iter().all(|b| !b));
        assert!(frame.normals.valid_count() == intr.width * intr.height);
    }

    #[test]
    fn background_pixels_carry_far_plane_depth() {
        let scene = plane_scene();
        let intr = test_intrinsics();
        // Look away from the plane.
        let pose = look_at_pose(&Vector3::zeros(), &Vector3::new(0.0, 0.0, -2.0));
        let frame = render_groundtruth(&scene, &pose, &intr);
        let idx = 48 * intr.width + 64;
        assert!(frame.background[idx]);
        assert_relative_eq!(frame.depth.get(64, 48).unwrap(), 50.0, epsilon = 1e-9);
        assert!(frame.normals.get(64, 48).is_none());
    }

    #[test]
    fn visibility_respects_occlusion() {
        let scene = box_room(8);
        let intr = test_intrinsics();
        let pose = scene.trajectory.pose(0);
        // A point on the far wall along the optical axis is visible...
        let center_pixel = Vector2::new(64.0, 48.0);
        let depth = scene.depth_at(&pose, &intr, &center_pixel).unwrap();
        let dir_cam = unproject(&center_pixel, 1.0, &intr).unwrap();
        let point_cam = dir_cam * depth / dir_cam.z;
        let point_world = pose.inverse().transform_point(&point_cam);
        assert!(scene.is_visible(&pose, &intr, &point_world, 1e-6));
        // ...but a point pushed behind the wall is not.
        let behind_cam = dir_cam * (depth + 0.5) / dir_cam.z;
        let behind_world = pose.inverse().transform_point(&behind_cam);
        assert!(!scene.is_visible(&pose, &intr, &behind_world, 1e-6));
    }

    #[test]
    fn lawnmower_path_stays_in_bounds() {
        let spec = TrajectorySpec::Lawnmower {
            min: [-1.0, -1.0],
            max: [1.0, 1.0],
            height: 1.5,
            look_at: [0.0, 0.0, 0.0],
            rows: 3,
            frames_per_row: 4,
        };
        assert_eq!(spec.frame_count(), 12);
        for k in 0..12 {
            let c = spec.pose(k).camera_center();
            assert!(c.x >= -1.0 - 1e-9 && c.x <= 1.0 + 1e-9);
            assert!(c.y >= -1.0 - 1e-9 && c.y <= 1.0 + 1e-9);
            assert_relative_eq!(c.z, 1.5, epsilon = 1e-9);
        }
    }
}
