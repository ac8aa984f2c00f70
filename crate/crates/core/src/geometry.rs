//! Planar geometry shared by the simulator and the metrics.

pub type Point = [f64; 2];

#[inline]
pub fn rotate(p: Point, angle: f64) -> Point {
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    libm::hypot(a[0] - b[0], a[1] - b[1])
}

/// A pose (position and heading) in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn to_local(&self, p: Point) -> Point {
        rotate([p[0] - self.x, p[1] - self.y], -self.heading)
    }

    pub fn to_world(&self, p: Point) -> Point {
        let r = rotate(p, self.heading);
        [r[0] + self.x, r[1] + self.y]
    }
}

/// Oriented rectangle: `length` runs along the heading, `width` across it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub center: Point,
    pub width: f64,
    pub length: f64,
    pub heading: f64,
}

impl OrientedBox {
    fn local(&self, p: Point) -> Point {
        rotate([p[0] - self.center[0], p[1] - self.center[1]], -self.heading)
    }

    /// Point containment, boundary included.
    pub fn contains(&self, p: Point) -> bool {
        let l = self.local(p);
        libm::fabs(l[0]) <= self.length / 2.0 && libm::fabs(l[1]) <= self.width / 2.0
    }

    /// Euclidean distance from `p` to the box (zero inside), computed in the box frame.
    pub fn distance(&self, p: Point) -> f64 {
        let l = self.local(p);
        let dx = f64::max(libm::fabs(l[0]) - self.length / 2.0, 0.0);
        let dy = f64::max(libm::fabs(l[1]) - self.width / 2.0, 0.0);
        libm::hypot(dx, dy)
    }

    pub fn half_diagonal(&self) -> f64 {
        libm::hypot(self.width, self.length) / 2.0
    }

    pub fn corners(&self) -> [Point; 4] {
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|c| {
            let r = rotate(c, self.heading);
            [r[0] + self.center[0], r[1] + self.center[1]]
        })
    }
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 == 0.0 {
        return dist(p, a);
    }
    let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

pub fn point_polyline_distance(p: Point, line: &[Point]) -> f64 {
    match line {
        [] => f64::INFINITY,
        [only] => dist(p, *only),
        _ => line
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut r = libm::fmod(a, two_pi);
    if r <= -core::f64::consts::PI {
        r += two_pi;
    } else if r > core::f64::consts::PI {
        r -= two_pi;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tangent_disc_touches_box() {
        let b = OrientedBox { center: [0.0, 0.0], width: 1.0, length: 2.0, heading: 0.3 };
        let edge = rotate([1.0 + 0.5, 0.0], 0.3);
        assert!((b.distance(edge) - 0.5).abs() < 1e-12);
        assert!(b.contains([0.0, 0.0]));
    }

    #[test]
    fn pose_roundtrip() {
        let pose = Pose { x: 1.5, y: -2.0, heading: 0.7 };
        let p = [3.0, 4.0];
        let back = pose.to_world(pose.to_local(p));
        assert!(dist(p, back) < 1e-12);
    }
}
