//! Camera geometry: SE(3) poses, pinhole projection, and patch reprojection.
//!
//! Poses are world-to-camera transforms stored as a unit quaternion plus a
//! translation vector so the manifold structure stays explicit; rotation
//! matrices are materialized on demand. Incremental updates are applied by
//! left multiplication, `T <- exp(xi) * T`, with twists laid out as
//! `[translation, rotation]`.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Identifies a frame across the whole run (monotone per input stream).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameId(pub u64);

impl std::fmt::Display for FrameId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Twist coordinates: `[vx, vy, vz, wx, wy, wz]`.
pub type Twist = Vector6<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("inverse depth must be > 0 (got {0})")]
    NonPositiveInverseDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// World-to-camera rigid transform: `x_cam = R * x_world + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from raw quaternion components `(qx, qy, qz, qw)` and a
    /// translation, normalizing the quaternion.
    pub fn from_parts(qx: f64, qy: f64, qz: f64, qw: f64, t: Vector3<f64>) -> Self {
        let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        Self {
            rotation: UnitQuaternion::from_quaternion(q),
            translation: t,
        }
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// World direction of a unit direction given in camera coordinates.
    pub fn rotate_to_world(&self, dir_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * dir_cam
    }

    /// Re-normalizes the quaternion; composition chains drift below 1e-9 but
    /// long-running trackers call this periodically anyway.
    pub fn renormalized(&self) -> Pose {
        Pose {
            rotation: UnitQuaternion::from_quaternion(*self.rotation.quaternion()),
            translation: self.translation,
        }
    }

    /// Left-multiplicative retraction: `exp(twist) * self`.
    pub fn retract(&self, twist: &Twist) -> Result<Pose, GeometryError> {
        Ok(se3_exp(twist)?.compose(self))
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.quaternion().coords.iter().all(|v| v.is_finite())
    }
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// SE(3) exponential map. Twist layout `[v, w]`; `exp(0)` is the identity.
pub fn se3_exp(twist: &Twist) -> Result<Pose, GeometryError> {
    if !twist.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite("twist"));
    }
    let v = Vector3::new(twist[0], twist[1], twist[2]);
    let w = Vector3::new(twist[3], twist[4], twist[5]);
    let theta = w.norm();
    let rotation = UnitQuaternion::from_scaled_axis(w);

    let wx = skew(&w);
    let wx2 = wx * wx;
    // V = I + c1 [w]x + c2 [w]x^2 with series fallbacks near theta = 0.
    let (c1, c2) = if theta < 1e-5 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    let v_mat = Matrix3::identity() + wx * c1 + wx2 * c2;
    Ok(Pose::new(rotation, v_mat * v))
}

/// SE(3) logarithm (principal branch, rotation angle < pi).
pub fn se3_log(pose: &Pose) -> Result<Twist, GeometryError> {
    if !pose.is_finite() {
        return Err(GeometryError::NonFinite("pose"));
    }
    let w = pose.rotation.scaled_axis();
    let theta = w.norm();
    let wx = skew(&w);
    let wx2 = wx * wx;
    // Inverse of the V matrix from se3_exp.
    let coeff = if theta < 1e-5 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - wx * 0.5 + wx2 * coeff;
    let v = v_inv * pose.translation;
    Ok(Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z))
}

/// Pinhole camera intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be > 0 (fx={fx}, fy={fy})"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= self.width as f64 - 1.0
            && pixel.y <= self.height as f64 - 1.0
    }
}

/// Projects a camera-frame point to a pixel. The returned pixel may lie
/// outside the image bounds; callers clip.
pub fn project(point_cam: &Vector3<f64>, intr: &Intrinsics) -> Result<Vector2<f64>, GeometryError> {
    let z = point_cam.z;
    if z <= 0.0 {
        return Err(GeometryError::BehindCamera { z });
    }
    Ok(Vector2::new(
        intr.fx * point_cam.x / z + intr.cx,
        intr.fy * point_cam.y / z + intr.cy,
    ))
}

/// Lifts a pixel with inverse depth to a camera-frame point. Convention:
/// `z = 1 / inv_depth`, `x = (u - cx) / fx * z`, `y = (v - cy) / fy * z`.
pub fn unproject(
    pixel: &Vector2<f64>,
    inv_depth: f64,
    intr: &Intrinsics,
) -> Result<Vector3<f64>, GeometryError> {
    if !(inv_depth > 0.0) {
        return Err(GeometryError::NonPositiveInverseDepth(inv_depth));
    }
    let z = 1.0 / inv_depth;
    Ok(Vector3::new(
        (pixel.x - intr.cx) / intr.fx * z,
        (pixel.y - intr.cy) / intr.fy * z,
        z,
    ))
}

/// A square pixel patch anchored in one frame with a single shared inverse
/// depth.
#[derive(Clone, Debug)]
pub struct Patch {
    pub frame_id: FrameId,
    pub pixel_us: Vec<f64>,
    pub pixel_vs: Vec<f64>,
    pub inv_depth: f64,
    pub size: usize,
}

impl Patch {
    /// Builds an s x s axis-aligned grid centered on `(cu, cv)`.
    pub fn grid(frame_id: FrameId, cu: f64, cv: f64, size: usize, inv_depth: f64) -> Self {
        let half = (size as f64 - 1.0) / 2.0;
        let mut pixel_us = Vec::with_capacity(size * size);
        let mut pixel_vs = Vec::with_capacity(size * size);
        for row in 0..size {
            for col in 0..size {
                pixel_us.push(cu - half + col as f64);
                pixel_vs.push(cv - half + row as f64);
            }
        }
        Self {
            frame_id,
            pixel_us,
            pixel_vs,
            inv_depth,
            size,
        }
    }

    /// Center pixel of the grid.
    pub fn center(&self) -> Vector2<f64> {
        let mid = self.pixel_us.len() / 2;
        Vector2::new(self.pixel_us[mid], self.pixel_vs[mid])
    }

    pub fn len(&self) -> usize {
        self.pixel_us.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_us.is_empty()
    }

    pub fn depth(&self) -> f64 {
        1.0 / self.inv_depth
    }
}

/// Reprojects every pixel of `patch` from frame `i` into frame `j`. Pixels
/// that land behind the target camera are flagged `None` instead of failing
/// the whole patch.
pub fn reproject_patch(
    patch: &Patch,
    pose_i: &Pose,
    pose_j: &Pose,
    intr: &Intrinsics,
) -> Vec<Option<Vector2<f64>>> {
    let rel = pose_j.compose(&pose_i.inverse());
    patch
        .pixel_us
        .iter()
        .zip(patch.pixel_vs.iter())
        .map(|(&u, &v)| {
            let p_i = unproject(&Vector2::new(u, v), patch.inv_depth, intr).ok()?;
            let p_j = rel.transform_point(&p_i);
            project(&p_j, intr).ok()
        })
        .collect()
}

/// Reprojects a single pixel (typically a patch center) from frame `i` into
/// frame `j`.
pub fn reproject_pixel(
    pixel: &Vector2<f64>,
    inv_depth: f64,
    pose_i: &Pose,
    pose_j: &Pose,
    intr: &Intrinsics,
) -> Option<Vector2<f64>> {
    let p_i = unproject(pixel, inv_depth, intr).ok()?;
    let p_j = pose_j.compose(&pose_i.inverse()).transform_point(&p_i);
    project(&p_j, intr).ok()
}

/// Reprojection of one pixel together with its derivatives, as used by the
/// bundle adjuster.
#[derive(Clone, Debug)]
pub struct ReprojectionJacobians {
    pub pixel: Vector2<f64>,
    /// d pixel / d twist of the source pose (left perturbation).
    pub wrt_pose_i: Matrix2x6<f64>,
    /// d pixel / d twist of the target pose (left perturbation).
    pub wrt_pose_j: Matrix2x6<f64>,
    /// d pixel / d inverse depth.
    pub wrt_inv_depth: Vector2<f64>,
}

/// Computes the reprojected pixel and its Jacobians with respect to both pose
/// twists and the inverse depth. Returns `None` when the point falls behind
/// the target camera.
pub fn reprojection_with_jacobians(
    pixel: &Vector2<f64>,
    inv_depth: f64,
    pose_i: &Pose,
    pose_j: &Pose,
    intr: &Intrinsics,
) -> Option<ReprojectionJacobians> {
    let p_i = unproject(pixel, inv_depth, intr).ok()?;
    let rel = pose_j.compose(&pose_i.inverse());
    let p_j = rel.transform_point(&p_i);
    if p_j.z <= 0.0 {
        return None;
    }
    let projected = project(&p_j, intr).ok()?;

    let z = p_j.z;
    let inv_z = 1.0 / z;
    // d pixel / d point_j
    let proj_jac = Matrix2x3::new(
        intr.fx * inv_z,
        0.0,
        -intr.fx * p_j.x * inv_z * inv_z,
        0.0,
        intr.fy * inv_z,
        -intr.fy * p_j.y * inv_z * inv_z,
    );

    let rel_rot = rel.rotation_matrix();

    // Left perturbation of T_j: d p_j = [I | -[p_j]x] xi_j.
    let mut wrt_pose_j = Matrix2x6::zeros();
    wrt_pose_j
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&proj_jac);
    wrt_pose_j
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(proj_jac * (-skew(&p_j))));

    // Left perturbation of T_i: d p_j = R_ji (-I | [p_i]x) xi_i.
    let mut wrt_pose_i = Matrix2x6::zeros();
    wrt_pose_i
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(proj_jac * (-rel_rot)));
    wrt_pose_i
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(proj_jac * rel_rot * skew(&p_i)));

    // d p_i / d inv_depth = -p_i / inv_depth (p_i scales as 1/d).
    let wrt_inv_depth = proj_jac * (rel_rot * (-p_i / inv_depth));

    Some(ReprojectionJacobians {
        pixel: projected,
        wrt_pose_i,
        wrt_pose_j,
        wrt_inv_depth,
    })
}
