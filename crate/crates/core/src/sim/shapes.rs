use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;

/// Rectangle with its long axis along `axis` (unit vector).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub center: Vec2,
    pub axis: Vec2,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedRect {
    pub fn new(center: Vec2, axis: Vec2, half_length: f64, half_width: f64) -> Self {
        Self {
            center,
            axis,
            half_length,
            half_width,
        }
    }

    /// Coordinates of `p` in the rectangle frame: (along axis, to the right).
    pub fn local(&self, p: Vec2) -> (f64, f64) {
        let d = p - self.center;
        (d.dot(self.axis), d.dot(self.axis.right_normal()))
    }

    pub fn contains(&self, p: Vec2) -> bool {
        self.contains_with_margin(p, 0.0)
    }

    pub fn contains_with_margin(&self, p: Vec2, margin: f64) -> bool {
        let (a, r) = self.local(p);
        a.abs() <= self.half_length + margin && r.abs() <= self.half_width + margin
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let a = self.axis * self.half_length;
        let r = self.axis.right_normal() * self.half_width;
        [
            self.center + a + r,
            self.center + a - r,
            self.center - a - r,
            self.center - a + r,
        ]
    }

    /// Corners plus edge midpoints.
    pub fn outline_samples(&self) -> [Vec2; 8] {
        let a = self.axis * self.half_length;
        let r = self.axis.right_normal() * self.half_width;
        let c = self.center;
        [
            c + a + r,
            c + a - r,
            c - a - r,
            c - a + r,
            c + a,
            c - a,
            c + r,
            c - r,
        ]
    }

    fn projected_radius(&self, dir: Vec2) -> f64 {
        self.half_length * self.axis.dot(dir).abs()
            + self.half_width * self.axis.right_normal().dot(dir).abs()
    }

    /// Separating-axis test. Touching edges count as overlap.
    pub fn overlaps(&self, other: &OrientedRect) -> bool {
        let d = other.center - self.center;
        let axes = [
            self.axis,
            self.axis.right_normal(),
            other.axis,
            other.axis.right_normal(),
        ];
        axes.iter().all(|&ax| {
            d.dot(ax).abs() <= self.projected_radius(ax) + other.projected_radius(ax)
        })
    }
}
