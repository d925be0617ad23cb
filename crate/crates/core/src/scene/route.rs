use crate::geometry::Vec2;

/// Piece of a route whose curvature varies linearly from `k0` to `k1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub length: f64,
    pub k0: f64,
    pub k1: f64,
}

impl Segment {
    pub fn straight(length: f64) -> Self {
        Self { length, k0: 0.0, k1: 0.0 }
    }

    pub fn ramp(length: f64, k0: f64, k1: f64) -> Self {
        Self { length, k0, k1 }
    }

    pub fn arc(length: f64, k: f64) -> Self {
        Self { length, k0: k, k1: k }
    }

    fn heading_change(&self) -> f64 {
        0.5 * (self.k0 + self.k1) * self.length
    }
}

const STEP: f64 = 0.05;

/// Centerline starting straight along −x behind the ego and following a
/// piecewise-linear curvature profile from the ego position onward. Arclength
/// `s = 0` is the ego position.
#[derive(Clone, Debug)]
pub struct Route {
    segments: Vec<Segment>,
    /// Samples at `s = i·STEP` for `s ≥ 0`.
    points: Vec<Vec2>,
    ahead: f64,
}

impl Route {
    /// Builds the route out to arclength `ahead`; the profile is extended
    /// straight past its last segment.
    pub fn new(segments: Vec<Segment>, ahead: f64) -> Self {
        let mut route = Self {
            segments,
            points: Vec::new(),
            ahead,
        };
        let n = (ahead / STEP).ceil() as usize + 1;
        let mut p = Vec2::ZERO;
        route.points.push(p);
        for i in 1..n {
            let mid = (i as f64 - 0.5) * STEP;
            p = p + Vec2::from_angle(route.heading_at(mid)) * STEP;
            route.points.push(p);
        }
        route
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        if s < 0.0 {
            return 0.0;
        }
        let mut start = 0.0;
        for seg in &self.segments {
            if s < start + seg.length {
                let u = (s - start) / seg.length;
                return seg.k0 + (seg.k1 - seg.k0) * u;
            }
            start += seg.length;
        }
        0.0
    }

    /// Heading in rad, unwrapped.
    pub fn heading_at(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let mut theta = 0.0;
        let mut start = 0.0;
        for seg in &self.segments {
            if s < start + seg.length {
                let u = s - start;
                return theta + seg.k0 * u + (seg.k1 - seg.k0) * u * u / (2.0 * seg.length);
            }
            theta += seg.heading_change();
            start += seg.length;
        }
        theta
    }

    pub fn position_at(&self, s: f64) -> Vec2 {
        if s <= 0.0 {
            return Vec2::new(s, 0.0);
        }
        let f = s / STEP;
        let i = f.floor() as usize;
        if i + 1 >= self.points.len() {
            let last = *self.points.last().unwrap();
            let extra = s - (self.points.len() - 1) as f64 * STEP;
            return last + Vec2::from_angle(self.heading_at(s)) * extra;
        }
        let u = f - i as f64;
        self.points[i] * (1.0 - u) + self.points[i + 1] * u
    }

    /// Heading change accumulated over the whole profile.
    pub fn total_turn(&self) -> f64 {
        self.segments.iter().map(Segment::heading_change).sum()
    }

    /// Arclength where the curvature profile ends.
    pub fn profile_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn max_abs_curvature(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.k0.abs().max(s.k1.abs()))
            .fold(0.0, f64::max)
    }

    /// Vertices every `spacing` m from `s = -behind` to the end of the route.
    pub fn polyline(&self, behind: f64, spacing: f64) -> Vec<Vec2> {
        let n = ((behind + self.ahead) / spacing).floor() as usize;
        (0..=n).map(|i| self.position_at(-behind + i as f64 * spacing)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circular_arc_closes_on_its_radius() {
        let k = 0.1;
        let quarter = std::f64::consts::FRAC_PI_2 / k;
        let r = Route::new(vec![Segment::arc(quarter, k)], quarter + 1.0);
        let end = r.position_at(quarter);
        assert!((end.x - 10.0).abs() < 1e-4 && (end.y - 10.0).abs() < 1e-4, "{end:?}");
        assert!((r.heading_at(quarter) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn straight_route_is_the_x_axis() {
        let r = Route::new(vec![Segment::straight(10.0)], 50.0);
        for s in [-5.0, 0.0, 3.3, 27.1, 49.9] {
            let p = r.position_at(s);
            assert_eq!(p.y, 0.0);
            assert!((p.x - s).abs() < 1e-9);
            assert_eq!(r.heading_at(s), 0.0);
        }
    }

    #[test]
    fn ramp_heading_matches_integral() {
        let r = Route::new(vec![Segment::straight(2.0), Segment::ramp(4.0, 0.0, 0.2), Segment::arc(3.0, 0.2)], 20.0);
        assert!((r.heading_at(6.0) - 0.4).abs() < 1e-12);
        assert!((r.heading_at(9.0) - 1.0).abs() < 1e-12);
        assert!((r.total_turn() - 1.0).abs() < 1e-12);
        assert!((r.curvature_at(4.0) - 0.1).abs() < 1e-12);
    }
}
