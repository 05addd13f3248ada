//! Rigid-body poses, pinhole intrinsics and camera rays.
//!
//! Conventions used everywhere in the crate:
//!
//! * Poses are camera-to-world: `X_world = R * X_cam + t`.
//! * Camera frame is x right, y down, z forward.
//! * Pixel `(u, v)` addresses the pixel whose centre sits at `(u + 0.5, v + 0.5)`
//!   in continuous image coordinates. [`Intrinsics::pixel_direction`] and
//!   [`Intrinsics::project`] are the only places that apply the half-pixel shift.
//! * Pose increments are applied on the left, `P <- exp(xi) * P`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const SMALL_ANGLE: f64 = 1e-6;

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Tangent-space increment: rotation part `omega` (radians) and translation part `v`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub omega: Vec3,
    pub v: Vec3,
}

impl Twist {
    pub fn new(omega: Vec3, v: Vec3) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Packs as `[omega, v]`.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.omega.x, self.omega.y, self.omega.z, self.v.x, self.v.y, self.v.z)
    }

    pub fn from_slice(s: &[f64; 6]) -> Self {
        Self {
            omega: Vec3::new(s[0], s[1], s[2]),
            v: Vec3::new(s[3], s[4], s[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.omega.x, self.omega.y, self.omega.z, self.v.x, self.v.y, self.v.z]
    }
}

#[inline]
pub fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// SO(3) exponential plus the left Jacobian `V` used for the translation part.
fn so3_exp_with_v(omega: &Vec3) -> (Mat3, Mat3) {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(omega);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        let r = Mat3::identity() + k + 0.5 * k2;
        let v = Mat3::identity() + 0.5 * k + k2 / 6.0;
        (r, v)
    } else {
        let (s, c) = theta.sin_cos();
        let a = s / theta;
        let b = (1.0 - c) / theta2;
        let cc = (theta - s) / (theta2 * theta);
        (Mat3::identity() + a * k + b * k2, Mat3::identity() + b * k + cc * k2)
    }
}

/// SE(3) exponential (Rodrigues closed form with a series fallback near zero).
pub fn exp_map(xi: &Twist) -> Pose {
    if xi.omega == Vec3::zeros() && xi.v == Vec3::zeros() {
        return Pose::identity();
    }
    let (r, v) = so3_exp_with_v(&xi.omega);
    Pose {
        rotation: r,
        translation: v * xi.v,
    }
}

/// SE(3) logarithm, inverse of [`exp_map`] for rotation angles below pi.
pub fn log_map(p: &Pose) -> Twist {
    let rot = Rotation3::from_matrix_unchecked(p.rotation);
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    let (w, imag) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let sin_half = imag.norm();
    let omega = if sin_half < 1e-12 {
        // angle ~ 2 * sin_half / w
        imag * (2.0 / w)
    } else {
        let angle = 2.0 * sin_half.atan2(w);
        imag * (angle / sin_half)
    };
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(&omega);
    let k2 = k * k;
    let v_inv = if theta < SMALL_ANGLE {
        Mat3::identity() - 0.5 * k + k2 / 12.0
    } else {
        let half = 0.5 * theta;
        let coef = (1.0 - half * half.cos() / half.sin()) / theta2;
        Mat3::identity() - 0.5 * k + coef * k2
    };
    Twist {
        omega,
        v: v_inv * p.translation,
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Mat3::identity(), t)
    }

    /// `self * other`
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Left-multiplied tangent update `exp(xi) * self`.
    pub fn retract(&self, xi: &Twist) -> Pose {
        exp_map(xi).compose(self).orthonormalized()
    }

    /// Projects the rotation back onto SO(3); keeps drift from repeated updates bounded.
    pub fn orthonormalized(&self) -> Pose {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        Pose {
            rotation: *q.to_rotation_matrix().matrix(),
            translation: self.translation,
        }
    }

    /// Quaternion in `(x, y, z, w)` order.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            self.rotation,
        ));
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.i, q.j, q.k, q.w]
    }

    pub fn from_quaternion_xyzw(t: Vec3, q: [f64; 4]) -> Result<Pose> {
        let quat = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
        let n = quat.norm();
        if !(n.is_finite() && n > 1e-9) {
            return Err(Error::Domain(format!("degenerate quaternion {q:?}")));
        }
        let u = UnitQuaternion::from_quaternion(quat);
        Ok(Pose::new(*u.to_rotation_matrix().matrix(), t))
    }

    /// Rotation angle between two poses, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let r = self.rotation.transpose() * other.rotation;
        let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x, r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y, r[(2, 0)],
            r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Pose {
        Pose::new(
            Mat3::new(a[0], a[1], a[2], a[4], a[5], a[6], a[8], a[9], a[10]),
            Vec3::new(a[3], a[7], a[11]),
        )
    }

    /// Camera pose at `eye` looking at `target`; `up` is the world up hint.
    /// The camera y axis points away from `up` (image rows grow downwards).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Pose> {
        let z = target - eye;
        if z.norm() < 1e-12 {
            return Err(Error::Domain("look_at with coincident eye and target".into()));
        }
        let z = z.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::Domain("look_at direction parallel to up".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Ok(Pose::new(Mat3::from_columns(&[x, y, z]), eye))
    }
}

/// Constant-velocity prediction `P_{t-1} * P_{t-2}^-1 * P_{t-1}`.
///
/// With one prior pose the prior is returned, with none the identity.
pub fn constant_speed_init(history: &[Pose]) -> Pose {
    match history {
        [] => Pose::identity(),
        [only] => *only,
        [.., prevprev, prev] => prev
            .compose(&prevprev.inverse())
            .compose(prev)
            .orthonormalized(),
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Unnormalized camera-frame direction `((u+.5-cx)/fx, (v+.5-cy)/fy, 1)`.
    #[inline]
    pub fn pixel_direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new(
            (u + 0.5 - self.cx) / self.fx,
            (v + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// Ratio of z-depth to distance along the unit ray through a pixel.
    #[inline]
    pub fn z_over_range(&self, u: f64, v: f64) -> f64 {
        1.0 / self.pixel_direction(u, v).norm()
    }

    /// Projects a camera-frame point to pixel-index coordinates. `None` behind the camera.
    pub fn project(&self, x_cam: &Vec3) -> Option<(f64, f64)> {
        if x_cam.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * x_cam.x / x_cam.z + self.cx - 0.5,
            self.fy * x_cam.y / x_cam.z + self.cy - 0.5,
        ))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Half-line `origin + s * direction`, `s >= 0`, with unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    #[inline]
    pub fn at(&self, s: f64) -> Vec3 {
        self.origin + self.direction * s
    }
}

/// World-space ray through pixel `(u, v)` of a camera at `pose`.
pub fn pixel_to_ray(u: f64, v: f64, k: &Intrinsics, pose: &Pose) -> Ray {
    let d = pose.rotation * k.pixel_direction(u, v);
    Ray {
        origin: pose.translation,
        direction: d.normalize(),
    }
}
