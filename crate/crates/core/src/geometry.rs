//! Rotation primitives shared by the filter, the simulator and the metrics.
//!
//! Conventions held throughout the crate:
//! - quaternions are scalar-first `(w, x, y, z)` and rotate body -> navigation,
//! - the orientation error `ε` is multiplicative on the body side,
//!   `R_true = R_est · exp([ε]ₓ)`,
//! - Euler angles are ZYX (yaw about z, then pitch about y, then roll about x).

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this rotation angle `quat_exp`/`quat_log` switch to their Taylor branch.
const SMALL_ANGLE: f64 = 1e-8;

/// Pitch margin (rad) to the gimbal singularity of the ZYX convention.
const GIMBAL_MARGIN: f64 = 1e-6;

/// Skew-symmetric cross-product matrix: `skew(v) * b == v.cross(&b)`.
#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Unit quaternion, scalar first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quaternion {
    pub const fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Builds a quaternion from raw components and normalizes it.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }.normalized()
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Self { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    /// Hamilton product `self ⊗ rhs`, renormalized.
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        let (a, b) = (self, rhs);
        Quaternion {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
        .normalized()
    }

    /// Rotation matrix (body -> navigation).
    pub fn to_rot(&self) -> Mat3 {
        let Quaternion { w, x, y, z } = *self;
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        Mat3::new(
            1.0 - 2.0 * (yy + zz),
            2.0 * (xy - wz),
            2.0 * (xz + wy),
            2.0 * (xy + wz),
            1.0 - 2.0 * (xx + zz),
            2.0 * (yz - wx),
            2.0 * (xz - wy),
            2.0 * (yz + wx),
            1.0 - 2.0 * (xx + yy),
        )
    }

    /// Inverse of [`Quaternion::to_rot`] (Shepperd's method). The sign is fixed
    /// so that `w >= 0`.
    pub fn from_rot(r: &Mat3) -> Quaternion {
        let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let q = if trace > 0.0 {
            let s = 2.0 * (1.0 + trace).sqrt();
            Quaternion {
                w: 0.25 * s,
                x: (r[(2, 1)] - r[(1, 2)]) / s,
                y: (r[(0, 2)] - r[(2, 0)]) / s,
                z: (r[(1, 0)] - r[(0, 1)]) / s,
            }
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = 2.0 * (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt();
            Quaternion {
                w: (r[(2, 1)] - r[(1, 2)]) / s,
                x: 0.25 * s,
                y: (r[(0, 1)] + r[(1, 0)]) / s,
                z: (r[(0, 2)] + r[(2, 0)]) / s,
            }
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = 2.0 * (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt();
            Quaternion {
                w: (r[(0, 2)] - r[(2, 0)]) / s,
                x: (r[(0, 1)] + r[(1, 0)]) / s,
                y: 0.25 * s,
                z: (r[(1, 2)] + r[(2, 1)]) / s,
            }
        } else {
            let s = 2.0 * (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt();
            Quaternion {
                w: (r[(1, 0)] - r[(0, 1)]) / s,
                x: (r[(0, 2)] + r[(2, 0)]) / s,
                y: (r[(1, 2)] + r[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        let q = q.normalized();
        if q.w < 0.0 {
            Quaternion { w: -q.w, x: -q.x, y: -q.y, z: -q.z }
        } else {
            q
        }
    }

    /// ZYX Euler angles `(roll, pitch, yaw)` -> quaternion.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Quaternion {
        let qz = quat_exp(&Vec3::new(0.0, 0.0, yaw));
        let qy = quat_exp(&Vec3::new(0.0, pitch, 0.0));
        let qx = quat_exp(&Vec3::new(roll, 0.0, 0.0));
        qz.mul(&qy).mul(&qx)
    }

    /// ZYX Euler angles `(roll, pitch, yaw)`. Fails at the gimbal singularity.
    pub fn to_euler(&self) -> Result<(f64, f64, f64)> {
        let pitch = self.pitch();
        check_gimbal(pitch)?;
        let Quaternion { w, x, y, z } = *self;
        let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
        Ok((roll, pitch, yaw_unchecked(self)))
    }

    fn pitch(&self) -> f64 {
        let s = 2.0 * (self.w * self.y - self.z * self.x);
        s.clamp(-1.0, 1.0).asin()
    }
}

/// Axis-angle vector (rad) -> unit quaternion.
pub fn quat_exp(phi: &Vec3) -> Quaternion {
    let angle = phi.norm();
    if angle < SMALL_ANGLE {
        let a2 = angle * angle;
        let k = 0.5 * (1.0 - a2 / 24.0);
        Quaternion { w: 1.0 - a2 / 8.0, x: k * phi.x, y: k * phi.y, z: k * phi.z }.normalized()
    } else {
        let half = 0.5 * angle;
        let k = half.sin() / angle;
        Quaternion { w: half.cos(), x: k * phi.x, y: k * phi.y, z: k * phi.z }.normalized()
    }
}

/// Inverse of [`quat_exp`], returning the rotation vector of angle in `[0, π]`.
pub fn quat_log(q: &Quaternion) -> Vec3 {
    let q = if q.w < 0.0 { Quaternion { w: -q.w, x: -q.x, y: -q.y, z: -q.z } } else { *q };
    let v = q.vector();
    let s = v.norm();
    if s < SMALL_ANGLE {
        v * (2.0 / q.w) * (1.0 - s * s / (3.0 * q.w * q.w))
    } else {
        v * (2.0 * s.atan2(q.w) / s)
    }
}

/// `exp([φ]ₓ)` as a rotation matrix.
pub fn rot_exp(phi: &Vec3) -> Mat3 {
    quat_exp(phi).to_rot()
}

/// Rotation vector of a rotation matrix.
pub fn rot_log(r: &Mat3) -> Vec3 {
    quat_log(&Quaternion::from_rot(r))
}

/// Right Jacobian of SO(3): `exp(φ + δ) ≈ exp(φ) · exp(J_r(φ) δ)`.
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let angle = phi.norm();
    let k = skew(phi);
    if angle < 1e-5 {
        Mat3::identity() - 0.5 * k + k * k / 6.0
    } else {
        let a2 = angle * angle;
        Mat3::identity() - (1.0 - angle.cos()) / a2 * k + (angle - angle.sin()) / (a2 * angle) * k * k
    }
}

/// Geodesic distance (rad) between two rotations.
pub fn rot_distance(a: &Mat3, b: &Mat3) -> f64 {
    rot_log(&(a.transpose() * b)).norm()
}

fn check_gimbal(pitch: f64) -> Result<()> {
    if pitch.abs() >= std::f64::consts::FRAC_PI_2 - GIMBAL_MARGIN {
        Err(Error::GimbalLock { pitch })
    } else {
        Ok(())
    }
}

fn yaw_unchecked(q: &Quaternion) -> f64 {
    let Quaternion { w, x, y, z } = *q;
    (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
}

/// Yaw angle (ZYX) in `(-π, π]`.
pub fn yaw_of(q: &Quaternion) -> Result<f64> {
    check_gimbal(q.pitch())?;
    Ok(yaw_unchecked(q))
}

/// Gradient of `ε ↦ yaw_of(q ⊗ exp(ε))` at `ε = 0`.
///
/// With body rates `ω`, the ZYX yaw rate is `(sin φ ω_y + cos φ ω_z) / cos θ`,
/// which is exactly this directional derivative.
pub fn yaw_gradient(q: &Quaternion) -> Result<Vec3> {
    let (roll, pitch, _) = q.to_euler()?;
    let c = pitch.cos();
    Ok(Vec3::new(0.0, roll.sin() / c, roll.cos() / c))
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}
