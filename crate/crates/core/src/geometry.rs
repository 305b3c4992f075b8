//! Rotations, unit directions and azimuth/elevation conversions.
//!
//! Angles follow the physics convention used throughout the crate:
//! azimuth is measured in the x-y plane from the x axis and lies in
//! `(-π, π]`, elevation is measured from the z axis and lies in `[0, π]`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in a Cartesian frame, in meters.
pub type Position = Vector3<f64>;

/// Separation below which two points are treated as the same location.
pub const MIN_SEPARATION: f64 = 1e-9;

/// Tolerance on `‖q‖ - 1` accepted by [`angles_from_direction`].
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Euler angles of the HRIS orientation, in radians.
///
/// `alpha` rotates about z, `beta` about y and `gamma` about x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationAngles {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl RotationAngles {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            alpha: wrap_angle(alpha),
            beta: wrap_angle(beta),
            gamma: wrap_angle(gamma),
        }
    }

    pub fn from_degrees(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self::new(alpha.to_radians(), beta.to_radians(), gamma.to_radians())
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite() && self.gamma.is_finite()
    }
}

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// `R = Rz(α) Ry(β) Rx(γ)`.
    ///
    /// The z factor carries `+sin α` in row 1, column 2 (it is the transpose
    /// of the usual right-handed z rotation); the derivatives of the angle
    /// maps are written against this exact product.
    pub fn from_angles(angles: RotationAngles) -> Self {
        let (sa, ca) = angles.alpha.sin_cos();
        let (sb, cb) = angles.beta.sin_cos();
        let (sg, cg) = angles.gamma.sin_cos();
        #[rustfmt::skip]
        let rz = Matrix3::new(
            ca,  sa,  0.0,
            -sa, ca,  0.0,
            0.0, 0.0, 1.0,
        );
        #[rustfmt::skip]
        let ry = Matrix3::new(
            cb,  0.0, sb,
            0.0, 1.0, 0.0,
            -sb, 0.0, cb,
        );
        #[rustfmt::skip]
        let rx = Matrix3::new(
            1.0, 0.0, 0.0,
            0.0, cg,  -sg,
            0.0, sg,  cg,
        );
        Self(rz * ry * rx)
    }

    /// Wraps a matrix that is already known to be a proper rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn column(&self, i: usize) -> Vector3<f64> {
        self.0.column(i).into_owned()
    }

    /// Columns `r1, r2, r3` stacked into one 9-vector.
    pub fn stacked(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        // nalgebra storage is column-major, which is exactly the stacking order.
        out.copy_from_slice(self.0.as_slice());
        out
    }

    /// Inverse of [`Rotation::stacked`]; does not re-orthogonalize.
    pub fn from_stacked(r: &[f64; 9]) -> Self {
        Self(Matrix3::from_column_slice(r))
    }

    /// `‖RᵀR − I‖_max` and `|det R − 1|`.
    pub fn orthogonality_defect(&self) -> (f64, f64) {
        let gram = self.0.transpose() * self.0 - Matrix3::identity();
        (gram.amax(), (self.0.determinant() - 1.0).abs())
    }

    pub fn frobenius_distance(&self, other: &Rotation) -> f64 {
        (self.0 - other.0).norm()
    }
}

/// An (azimuth, elevation) pair in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnglePair {
    pub az: f64,
    pub el: f64,
}

impl AnglePair {
    pub fn new(az: f64, el: f64) -> Self {
        Self { az, el }
    }

    /// Euclidean distance between two angle pairs with the azimuth
    /// difference wrapped onto `(-π, π]`.
    pub fn distance(&self, other: &AnglePair) -> f64 {
        let daz = wrap_angle(self.az - other.az);
        let del = self.el - other.el;
        daz.hypot(del)
    }
}

/// Wraps an angle onto `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Unit direction from `from` to `to`, expressed in the frame whose axes are
/// the columns of `r`: `Rᵀ (to − from) / ‖to − from‖`.
pub fn direction_local(r: &Rotation, from: &Position, to: &Position) -> Result<Vector3<f64>> {
    let delta = to - from;
    let n = delta.norm();
    if !(n >= MIN_SEPARATION) {
        return Err(Error::CoincidentPoints { separation: n });
    }
    Ok(r.matrix().transpose() * (delta / n))
}

/// Global-frame unit direction from `from` to `to`.
pub fn direction(from: &Position, to: &Position) -> Result<Vector3<f64>> {
    direction_local(&Rotation::identity(), from, to)
}

/// `az = atan2(q₂, q₁)`, `el = acos(q₃)`; azimuth is 0 on the poles.
pub fn angles_from_direction(q: &Vector3<f64>) -> Result<AnglePair> {
    let norm = q.norm();
    if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(Error::NotUnit { norm });
    }
    let el = q.z.clamp(-1.0, 1.0).acos();
    let az = if q.x == 0.0 && q.y == 0.0 {
        0.0
    } else {
        wrap_angle(q.y.atan2(q.x))
    };
    Ok(AnglePair { az, el })
}

/// Unit vector pointing along an (azimuth, elevation) pair.
pub fn kappa(angles: &AnglePair) -> Vector3<f64> {
    let (sa, ca) = angles.az.sin_cos();
    let (se, ce) = angles.el.sin_cos();
    Vector3::new(ca * se, sa * se, ce)
}
