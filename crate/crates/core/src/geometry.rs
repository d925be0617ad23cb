//! Planar geometry: vectors, oriented boxes and polylines.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
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

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Rectangle with center, half-extents along its own axes, and heading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    pub half: Vec2,
    pub heading: f64,
}

impl OrientedBox {
    pub fn new(center: Vec2, half: Vec2, heading: f64) -> Self {
        Self { center, half, heading }
    }

    fn axes(&self) -> [Vec2; 2] {
        let u = Vec2::from_angle(self.heading);
        [u, u.perp()]
    }

    /// Half-width of the box's shadow on unit axis `n`.
    fn radius_along(&self, n: Vec2) -> f64 {
        let [u, v] = self.axes();
        self.half.x * u.dot(n).abs() + self.half.y * v.dot(n).abs()
    }

    /// Separating-axis test; touching boxes do not overlap.
    pub fn overlaps(&self, other: &OrientedBox) -> bool {
        let d = other.center - self.center;
        self.axes()
            .into_iter()
            .chain(other.axes())
            .all(|n| d.dot(n).abs() < self.radius_along(n) + other.radius_along(n))
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let d = p - self.center;
        let [u, v] = self.axes();
        d.dot(u).abs() <= self.half.x && d.dot(v).abs() <= self.half.y
    }
}

/// Result of projecting a point onto a polyline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Arclength from the first vertex to the foot point.
    pub arclength: f64,
    pub distance: f64,
}

/// Closest point on `line` to `p`.
///
/// # Panics
/// If `line` has fewer than two vertices.
pub fn project_onto_polyline(line: &[Vec2], p: Vec2) -> Projection {
    assert!(line.len() >= 2, "polyline needs two vertices");
    let mut best = Projection {
        arclength: 0.0,
        distance: f64::INFINITY,
    };
    let mut s0 = 0.0;
    for w in line.windows(2) {
        let seg = w[1] - w[0];
        let len2 = seg.dot(seg);
        let u = if len2 > 0.0 {
            ((p - w[0]).dot(seg) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let foot = w[0] + seg * u;
        let dist = (p - foot).norm();
        if dist < best.distance {
            best = Projection {
                arclength: s0 + u * len2.sqrt(),
                distance: dist,
            };
        }
        s0 += len2.sqrt();
    }
    best
}

pub fn polyline_length(line: &[Vec2]) -> f64 {
    line.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Distance from `p` to the nearest point of `line`.
pub fn distance_to_polyline(line: &[Vec2], p: Vec2) -> f64 {
    project_onto_polyline(line, p).distance
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_and_overlapping_boxes() {
        let a = OrientedBox::new(Vec2::ZERO, Vec2::new(2.25, 1.0), 0.0);
        let b = OrientedBox::new(Vec2::new(4.0, 0.0), Vec2::new(2.25, 1.0), 0.0);
        assert!(a.overlaps(&b));
        let c = OrientedBox::new(Vec2::new(4.6, 0.0), Vec2::new(2.25, 1.0), 0.0);
        assert!(!a.overlaps(&c));
        // rotated by 45°: corner reaches 1.0·(cos+sin) + ... along x
        let d = OrientedBox::new(Vec2::new(3.5, 0.0), Vec2::new(1.0, 1.0), std::f64::consts::FRAC_PI_4);
        assert!(a.overlaps(&d));
        let e = OrientedBox::new(Vec2::new(3.7, 0.0), Vec2::new(1.0, 1.0), std::f64::consts::FRAC_PI_4);
        assert!(!a.overlaps(&e));
    }

    #[test]
    fn polyline_projection() {
        let line = [Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0), Vec2::new(10.0, 10.0)];
        let p = project_onto_polyline(&line, Vec2::new(4.0, 2.0));
        assert!((p.arclength - 4.0).abs() < 1e-12 && (p.distance - 2.0).abs() < 1e-12);
        let p = project_onto_polyline(&line, Vec2::new(12.0, 5.0));
        assert!((p.arclength - 15.0).abs() < 1e-12 && (p.distance - 2.0).abs() < 1e-12);
        assert_eq!(polyline_length(&line), 20.0);
    }
}
