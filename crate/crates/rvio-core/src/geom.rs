//! Quaternion and rotation primitives.
//!
//! Conventions, fixed once here and relied on everywhere else:
//! - quaternions are scalar-first `[w, x, y, z]` and composed with the
//!   Hamilton product;
//! - `q_a_b` names the rotation from frame `a` to frame `b`, and
//!   [`Quat::to_rotation`] returns the coordinate-change matrix `C(q)`
//!   with `x_b = C(q_a_b) * x_a`;
//! - composition satisfies `C(q1 ⊗ q2) = C(q2) * C(q1)`;
//! - attitude kinematics follow `q̇ = ½ Ω(ω) q` with body-frame rate `ω`,
//!   which is the right-multiplication `q ⊗ [1, ω dt/2]` for one step.

use nalgebra::{Matrix3, Matrix4, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Antisymmetric cross-product matrix: `skew(u) * v == u.cross(&v)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// 4x4 quaternion rate operator: `q̇ = ½ Ω(ω) q` for a scalar-first quaternion.
pub fn omega(w: &Vec3) -> Mat4 {
    Mat4::new(
        0.0, -w.x, -w.y, -w.z, //
        w.x, 0.0, w.z, -w.y, //
        w.y, -w.z, 0.0, w.x, //
        w.z, w.y, -w.x, 0.0,
    )
}

/// Unit quaternion, scalar part first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }.normalized()
    }

    /// Quaternion for a small rotation `δq ≃ [1, ½δθ]`, renormalized.
    pub fn from_small_angle(dtheta: &Vec3) -> Self {
        Quat {
            w: 1.0,
            x: 0.5 * dtheta.x,
            y: 0.5 * dtheta.y,
            z: 0.5 * dtheta.z,
        }
        .normalized()
    }

    /// Exact axis-angle construction, used by oracles and the simulator.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n < 1e-300 {
            return Quat::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let u = axis / n;
        Quat {
            w: c,
            x: s * u.x,
            y: s * u.y,
            z: s * u.z,
        }
        .normalized()
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        assert!(n > 1e-300, "cannot normalize a zero quaternion");
        // Keep the scalar part non-negative so equal rotations compare equal.
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Quat {
            w: self.w * s,
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
        }
    }

    pub fn conjugate(&self) -> Self {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn vec(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    /// Coordinate-change matrix `C(q_a_b)` mapping frame-`a` coordinates to
    /// frame-`b` coordinates. Orthonormal with determinant +1.
    pub fn to_rotation(&self) -> Mat3 {
        let q = if (self.norm() - 1.0).abs() > 1e-9 {
            debug_assert!(false, "to_rotation called on a non-unit quaternion");
            self.normalized()
        } else {
            *self
        };
        let v = q.vec();
        let w = q.w;
        Mat3::identity() * (w * w - v.dot(&v)) + 2.0 * v * v.transpose() - 2.0 * w * skew(&v)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.vec().norm().atan2(self.w.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Hamilton product `a ⊗ b`, scalar-first.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    Quat {
        w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    }
}

/// Small-angle quaternion, spec'd as a free function alongside `quat_mul`.
pub fn small_angle_quat(dtheta: &Vec3) -> Quat {
    Quat::from_small_angle(dtheta)
}
