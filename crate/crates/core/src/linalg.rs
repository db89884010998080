//! Fixed-size 2-vectors and 2x2 matrices.
//!
//! Almost everything in the blowup analysis happens in the plane normal to the
//! discontinuity, so a tiny hand-rolled type keeps the hot paths allocation-free.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector at angle `theta`.
    pub fn polar(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Rotation by +pi/2.
    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }

    pub fn outer(self, other: Vec2) -> Mat2 {
        Mat2::new(
            self.x * other.x,
            self.x * other.y,
            self.y * other.x,
            self.y * other.y,
        )
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    fn mul(self, v: Vec2) -> Vec2 {
        v * self
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(a: [f64; 2]) -> Self {
        Vec2::new(a[0], a[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

/// Row-major 2x2 matrix `[[m00, m01], [m10, m11]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat2 {
    pub m: [[f64; 2]; 2],
}

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2 {
        m: [[1.0, 0.0], [0.0, 1.0]],
    };

    pub const fn new(m00: f64, m01: f64, m10: f64, m11: f64) -> Self {
        Self {
            m: [[m00, m01], [m10, m11]],
        }
    }

    /// Counter-clockwise rotation through `phi`.
    pub fn rotation(phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Self::new(c, -s, s, c)
    }

    pub fn scaled_identity(k: f64) -> Self {
        Self::new(k, 0.0, 0.0, k)
    }

    pub fn trace(&self) -> f64 {
        self.m[0][0] + self.m[1][1]
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// `tr^2 - 4 det`; negative means complex eigenvalues.
    pub fn discriminant(&self) -> f64 {
        let t = self.trace();
        t * t - 4.0 * self.det()
    }

    pub fn transpose(&self) -> Self {
        Self::new(self.m[0][0], self.m[1][0], self.m[0][1], self.m[1][1])
    }

    pub fn max_abs(&self) -> f64 {
        self.m
            .iter()
            .flatten()
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// Inverse, or `None` when the determinant is negligible relative to the entries.
    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        let scale = self.max_abs();
        if !det.is_finite() || scale == 0.0 || det.abs() <= 1e-14 * scale * scale {
            return None;
        }
        let inv = 1.0 / det;
        Some(Self::new(
            self.m[1][1] * inv,
            -self.m[0][1] * inv,
            -self.m[1][0] * inv,
            self.m[0][0] * inv,
        ))
    }

    pub fn mul_vec(&self, v: Vec2) -> Vec2 {
        Vec2::new(
            self.m[0][0] * v.x + self.m[0][1] * v.y,
            self.m[1][0] * v.x + self.m[1][1] * v.y,
        )
    }

    /// Eigenvalues as `(re, im)` pairs, larger real part (or positive imaginary part) first.
    pub fn eigenvalues(&self) -> [(f64, f64); 2] {
        let half_tr = 0.5 * self.trace();
        let disc = 0.25 * self.discriminant();
        if disc >= 0.0 {
            let r = disc.sqrt();
            [(half_tr + r, 0.0), (half_tr - r, 0.0)]
        } else {
            let r = (-disc).sqrt();
            [(half_tr, r), (half_tr, -r)]
        }
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, o: Mat2) -> Mat2 {
        Mat2::new(
            self.m[0][0] + o.m[0][0],
            self.m[0][1] + o.m[0][1],
            self.m[1][0] + o.m[1][0],
            self.m[1][1] + o.m[1][1],
        )
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, o: Mat2) -> Mat2 {
        Mat2::new(
            self.m[0][0] - o.m[0][0],
            self.m[0][1] - o.m[0][1],
            self.m[1][0] - o.m[1][0],
            self.m[1][1] - o.m[1][1],
        )
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, o: Mat2) -> Mat2 {
        let a = &self.m;
        let b = &o.m;
        Mat2::new(
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        )
    }
}

impl Mul<f64> for Mat2 {
    type Output = Mat2;
    fn mul(self, k: f64) -> Mat2 {
        Mat2::new(
            self.m[0][0] * k,
            self.m[0][1] * k,
            self.m[1][0] * k,
            self.m[1][1] * k,
        )
    }
}

impl Mul<Vec2> for Mat2 {
    type Output = Vec2;
    fn mul(self, v: Vec2) -> Vec2 {
        self.mul_vec(v)
    }
}

/// Wrap an angle into `[0, 2pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let w = theta.rem_euclid(tau);
    if w >= tau {
        0.0
    } else {
        w
    }
}

/// Shortest signed distance between two angles, in `(-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    if d > pi {
        d - std::f64::consts::TAU
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_roundtrip() {
        let a = Mat2::new(172.0, -186.0, 186.0, -200.0);
        let inv = a.inverse().unwrap();
        let p = a * inv;
        assert!((p - Mat2::IDENTITY).max_abs() < 1e-12);
        assert!((a.det() - 196.0).abs() < 1e-9);
    }

    #[test]
    fn singular_has_no_inverse() {
        assert!(Mat2::new(1.0, 2.0, 2.0, 4.0).inverse().is_none());
    }

    #[test]
    fn complex_eigenvalues() {
        let r = Mat2::rotation(0.3);
        let ev = r.eigenvalues();
        assert!((ev[0].0 - 0.3_f64.cos()).abs() < 1e-15);
        assert!((ev[0].1 - 0.3_f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn angle_helpers() {
        assert!((wrap_angle(-0.5) - (std::f64::consts::TAU - 0.5)).abs() < 1e-15);
        assert!((angle_diff(0.1, std::f64::consts::TAU - 0.1) - 0.2).abs() < 1e-12);
    }
}
