//! Finite-difference kinematics of waypoint sequences sampled every [`DT`].

use crate::config::DT;
use crate::geometry::Vec2;

/// Accelerations `(p[i+1] − 2p[i] + p[i−1]) / Δt²` at interior points.
pub fn accelerations(p: &[Vec2]) -> Vec<Vec2> {
    p.windows(3)
        .map(|w| (w[2] - w[1] * 2.0 + w[0]) * (1.0 / (DT * DT)))
        .collect()
}

/// Central velocities `(p[i+1] − p[i−1]) / 2Δt` at interior points.
pub fn central_velocities(p: &[Vec2]) -> Vec<Vec2> {
    p.windows(3).map(|w| (w[2] - w[0]) * (1.0 / (2.0 * DT))).collect()
}

/// Differences of consecutive interior accelerations over Δt.
pub fn jerks(p: &[Vec2]) -> Vec<Vec2> {
    accelerations(p)
        .windows(2)
        .map(|w| (w[1] - w[0]) * (1.0 / DT))
        .collect()
}

/// Curvature `|v × a| / |v|³` from a velocity/acceleration pair. A standstill
/// with any lateral acceleration is infinitely curved.
pub fn curvature(v: Vec2, a: Vec2) -> f64 {
    let speed = v.norm();
    let cross = v.cross(a).abs();
    if speed < 1e-9 {
        return if a.norm() < 1e-12 { 0.0 } else { f64::INFINITY };
    }
    cross / (speed * speed * speed)
}

/// Curvature at every interior point.
pub fn curvatures(p: &[Vec2]) -> Vec<f64> {
    central_velocities(p)
        .into_iter()
        .zip(accelerations(p))
        .map(|(v, a)| curvature(v, a))
        .collect()
}
