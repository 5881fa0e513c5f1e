//! Unit quaternions for orientation streams.
//!
//! Convention: Hamilton product, components stored (w, x, y, z), canonical
//! hemisphere w ≥ 0 (ties broken by the first nonzero component). Rotation
//! composition reads left to right through the calibration chain.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuatError {
    #[error("quaternion norm {0} too far from 1")]
    NonUnitInput(f64),
    #[error("quaternion has non-finite components")]
    NonFinite,
}

pub const UNIT_TOLERANCE: f64 = 1e-6;
pub const UNIT_EMIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 4]> for Quat {
    fn from(v: [f64; 4]) -> Quat {
        Quat { w: v[0], x: v[1], y: v[2], z: v[3] }
    }
}

impl From<Quat> for [f64; 4] {
    fn from(q: Quat) -> [f64; 4] {
        [q.w, q.x, q.y, q.z]
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Validates unit norm (to 1e-6), then renormalizes and canonicalizes.
    pub fn new_checked(w: f64, x: f64, y: f64, z: f64) -> Result<Quat, QuatError> {
        let q = Quat { w, x, y, z };
        if ![w, x, y, z].iter().all(|v| v.is_finite()) {
            return Err(QuatError::NonFinite);
        }
        let n = q.norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(QuatError::NonUnitInput(n));
        }
        Ok(q.renormalized().canonical())
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    fn renormalized(self) -> Quat {
        let n = self.norm();
        Quat { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    /// Flips to the w ≥ 0 hemisphere; at w == 0 the first nonzero of
    /// (x, y, z) is made positive so q and -q always map to one choice.
    pub fn canonical(self) -> Quat {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            Quat { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            self
        }
    }

    pub fn conjugate(self) -> Quat {
        Quat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Quat {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 {
            return Quat::IDENTITY;
        }
        let (s, c) = (angle * 0.5).sin_cos();
        Quat { w: c, x: s * axis[0] / n, y: s * axis[1] / n, z: s * axis[2] / n }
            .renormalized()
            .canonical()
    }

    /// Rotates a vector: v' = q v q*.
    pub fn rotate(self, v: [f64; 3]) -> [f64; 3] {
        let Quat { w, x, y, z } = self;
        // expanded sandwich product, avoids building intermediate quats
        let tx = 2.0 * (y * v[2] - z * v[1]);
        let ty = 2.0 * (z * v[0] - x * v[2]);
        let tz = 2.0 * (x * v[1] - y * v[0]);
        [
            v[0] + w * tx + (y * tz - z * ty),
            v[1] + w * ty + (z * tx - x * tz),
            v[2] + w * tz + (x * ty - y * tx),
        ]
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Angle of the relative rotation between two unit quaternions, radians.
    pub fn angle_to(self, o: Quat) -> f64 {
        2.0 * self.dot(o).abs().clamp(0.0, 1.0).acos()
    }
}

/// Hamilton product of unit quaternions, renormalized and canonicalized.
pub fn quat_mul(a: Quat, b: Quat) -> Result<Quat, QuatError> {
    for q in [a, b] {
        let n = q.norm();
        if !n.is_finite() {
            return Err(QuatError::NonFinite);
        }
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(QuatError::NonUnitInput(n));
        }
    }
    let q = Quat {
        w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    };
    Ok(q.renormalized().canonical())
}
