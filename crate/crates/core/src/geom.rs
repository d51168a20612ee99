//! Planar geometry primitives shared across the crate: vectors, poses,
//! oriented bounding boxes, and polyline helpers.

use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// 2-D vector in meters (or meters/second for velocities).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2<F> {
    pub x: F,
    pub y: F,
}

impl<F: Scalar> Vec2<F> {
    pub fn new(x: F, y: F) -> Self {
        Self { x, y }
    }

    pub fn zero() -> Self {
        Self {
            x: F::zero(),
            y: F::zero(),
        }
    }

    pub fn dot(self, other: Self) -> F {
        self.x * other.x + self.y * other.y
    }

    /// Z-component of the 2-D cross product.
    pub fn cross(self, other: Self) -> F {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> F {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Self) -> F {
        (self - other).norm()
    }

    /// Unit vector, or zero when the norm underflows.
    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n > F::zero() {
            self / n
        } else {
            Self::zero()
        }
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Self {
        Self {
            x: -self.y,
            y: self.x,
        }
    }

    pub fn rotated(self, angle: F) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            x: c * self.x - s * self.y,
            y: s * self.x + c * self.y,
        }
    }

    pub fn angle(self) -> F {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl<F: Scalar> Add for Vec2<F> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl<F: Scalar> AddAssign for Vec2<F> {
    fn add_assign(&mut self, rhs: Self) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl<F: Scalar> Sub for Vec2<F> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl<F: Scalar> Mul<F> for Vec2<F> {
    type Output = Self;
    fn mul(self, rhs: F) -> Self {
        Self::new(self.x * rhs, self.y * rhs)
    }
}

impl<F: Scalar> Div<F> for Vec2<F> {
    type Output = Self;
    fn div(self, rhs: F) -> Self {
        Self::new(self.x / rhs, self.y / rhs)
    }
}

impl<F: Scalar> Neg for Vec2<F> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

/// Planar pose: position plus heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose<F> {
    pub position: Vec2<F>,
    pub heading: F,
}

impl<F: Scalar> Pose<F> {
    pub fn new(position: Vec2<F>, heading: F) -> Self {
        Self { position, heading }
    }

    /// Map a point from this pose's local frame into the world frame.
    pub fn local_to_world(&self, p: Vec2<F>) -> Vec2<F> {
        self.position + p.rotated(self.heading)
    }

    /// Map a world point into this pose's local frame.
    pub fn world_to_local(&self, p: Vec2<F>) -> Vec2<F> {
        (p - self.position).rotated(-self.heading)
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.heading.is_finite()
    }
}

/// Normalize an angle to the half-open interval (-pi, pi].
pub fn wrap_angle<F: Scalar>(angle: F) -> F {
    let two_pi = F::cast(std::f64::consts::TAU);
    let pi = F::cast(std::f64::consts::PI);
    let mut a = (angle + pi) % two_pi;
    if a <= F::zero() {
        a += two_pi;
    }
    a - pi
}

/// Oriented bounding box for a vehicle footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb<F> {
    pub center: Vec2<F>,
    pub heading: F,
    pub length: F,
    pub width: F,
}

impl<F: Scalar> Obb<F> {
    pub fn new(center: Vec2<F>, heading: F, length: F, width: F) -> Self {
        Self {
            center,
            heading,
            length,
            width,
        }
    }

    /// Half-extent of the box projected on a unit direction (support radius).
    pub fn support_radius(&self, dir: Vec2<F>) -> F {
        let half = F::cast(0.5);
        let axis = Vec2::new(self.heading.cos(), self.heading.sin());
        let along = dir.dot(axis).abs();
        let across = dir.dot(axis.perp()).abs();
        self.length * half * along + self.width * half * across
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [Vec2<F>; 4] {
        let half = F::cast(0.5);
        let hl = self.length * half;
        let hw = self.width * half;
        let axis = Vec2::new(self.heading.cos(), self.heading.sin());
        let side = axis.perp();
        [
            self.center + axis * hl + side * hw,
            self.center - axis * hl + side * hw,
            self.center - axis * hl - side * hw,
            self.center + axis * hl - side * hw,
        ]
    }

    pub fn contains_point(&self, p: Vec2<F>) -> bool {
        let local = (p - self.center).rotated(-self.heading);
        let half = F::cast(0.5);
        local.x.abs() <= self.length * half && local.y.abs() <= self.width * half
    }

    /// Exact Euclidean distance from a point to the box; zero inside.
    pub fn distance_to_point(&self, p: Vec2<F>) -> F {
        let local = (p - self.center).rotated(-self.heading);
        let half = F::cast(0.5);
        let dx = (local.x.abs() - self.length * half).max(F::zero());
        let dy = (local.y.abs() - self.width * half).max(F::zero());
        (dx * dx + dy * dy).sqrt()
    }

    /// Separating-axis overlap test between two boxes.
    pub fn overlaps(&self, other: &Obb<F>) -> bool {
        let axes = [
            Vec2::new(self.heading.cos(), self.heading.sin()),
            Vec2::new(self.heading.cos(), self.heading.sin()).perp(),
            Vec2::new(other.heading.cos(), other.heading.sin()),
            Vec2::new(other.heading.cos(), other.heading.sin()).perp(),
        ];
        let delta = other.center - self.center;
        for axis in axes {
            let gap = delta.dot(axis).abs() - self.support_radius(axis) - other.support_radius(axis);
            if gap > F::zero() {
                return false;
            }
        }
        true
    }

    /// Half-diagonal: radius of the disc that circumscribes the footprint.
    pub fn disc_radius(&self) -> F {
        let half = F::cast(0.5);
        ((self.length * half).powi(2) + (self.width * half).powi(2)).sqrt()
    }
}

/// Distance from point `p` to segment `[a, b]`.
pub fn point_segment_distance<F: Scalar>(p: Vec2<F>, a: Vec2<F>, b: Vec2<F>) -> F {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == F::zero() {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).max(F::zero()).min(F::one());
    p.distance(a + ab * t)
}

/// Distance from point `p` to a polyline, with the index of the closest segment.
pub fn point_polyline_distance<F: Scalar>(p: Vec2<F>, polyline: &[Vec2<F>]) -> (F, usize) {
    assert!(polyline.len() >= 2, "polyline needs at least two points");
    let mut best = F::infinity();
    let mut seg = 0;
    for i in 0..polyline.len() - 1 {
        let d = point_segment_distance(p, polyline[i], polyline[i + 1]);
        if d < best {
            best = d;
            seg = i;
        }
    }
    (best, seg)
}

/// Proper or touching intersection of segments `[a1, a2]` and `[b1, b2]`.
pub fn segments_intersect<F: Scalar>(a1: Vec2<F>, a2: Vec2<F>, b1: Vec2<F>, b2: Vec2<F>) -> bool {
    fn orient<F: Scalar>(a: Vec2<F>, b: Vec2<F>, c: Vec2<F>) -> F {
        (b - a).cross(c - a)
    }
    fn on_segment<F: Scalar>(a: Vec2<F>, b: Vec2<F>, p: Vec2<F>) -> bool {
        p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
    }
    let d1 = orient(b1, b2, a1);
    let d2 = orient(b1, b2, a2);
    let d3 = orient(a1, a2, b1);
    let d4 = orient(a1, a2, b2);
    if ((d1 > F::zero() && d2 < F::zero()) || (d1 < F::zero() && d2 > F::zero()))
        && ((d3 > F::zero() && d4 < F::zero()) || (d3 < F::zero() && d4 > F::zero()))
    {
        return true;
    }
    (d1 == F::zero() && on_segment(b1, b2, a1))
        || (d2 == F::zero() && on_segment(b1, b2, a2))
        || (d3 == F::zero() && on_segment(a1, a2, b1))
        || (d4 == F::zero() && on_segment(a1, a2, b2))
}

/// Curvature of the circle through three points; zero for collinear points.
pub fn three_point_curvature<F: Scalar>(p1: Vec2<F>, p2: Vec2<F>, p3: Vec2<F>) -> F {
    let a = p1.distance(p2);
    let b = p2.distance(p3);
    let c = p1.distance(p3);
    let area2 = (p2 - p1).cross(p3 - p1).abs();
    let denom = a * b * c;
    if denom == F::zero() {
        return F::zero();
    }
    // kappa = 1/R = 4*Area / (a*b*c), Area = area2/2
    F::cast(2.0) * area2 / denom
}
