//! Small geometric helpers shared by the point, carving and integration stages.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

/// Axis-aligned bounding box, closed on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    /// Box with the given edge lengths centered at `center`.
    pub fn centered(center: [f64; 3], size: [f64; 3]) -> Self {
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for a in 0..3 {
            min[a] = center[a] - 0.5 * size[a];
            max[a] = center[a] + 0.5 * size[a];
        }
        Self { min, max }
    }

    /// 1x1x1 box at the origin, used for object-centric captures.
    pub fn unit() -> Self {
        Self::centered([0.0; 3], [1.0; 3])
    }

    /// 1.5x1.5x1.5 box centered at (0, 0, -0.75), used for handheld captures.
    pub fn tabletop() -> Self {
        Self::centered([0.0, 0.0, -0.75], [1.5; 3])
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|a| self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a])
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn size(&self) -> Vector3<f64> {
        Vector3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }

    /// Tight box around `points`, or `None` when empty.
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point3<f64>>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = Self {
            min: [first.x, first.y, first.z],
            max: [first.x, first.y, first.z],
        };
        for p in it {
            for a in 0..3 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        Some(b)
    }

    pub fn padded(&self, margin: f64) -> Self {
        let mut b = *self;
        for a in 0..3 {
            b.min[a] -= margin;
            b.max[a] += margin;
        }
        b
    }

    pub fn intersection(&self, other: &Aabb) -> Option<Aabb> {
        let mut b = *self;
        for a in 0..3 {
            b.min[a] = b.min[a].max(other.min[a]);
            b.max[a] = b.max[a].min(other.max[a]);
        }
        b.is_valid().then_some(b)
    }
}

/// Integer voxel coordinate of `p` on a grid of edge `grid` anchored at the world origin.
pub fn voxel_key(p: &Point3<f64>, grid: f64) -> [i64; 3] {
    [
        (p.x / grid).floor() as i64,
        (p.y / grid).floor() as i64,
        (p.z / grid).floor() as i64,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let u = Aabb::unit();
        assert_eq!(u.min, [-0.5; 3]);
        assert_eq!(u.max, [0.5; 3]);
        let t = Aabb::tabletop();
        assert_eq!(t.min, [-0.75, -0.75, -1.5]);
        assert_eq!(t.max, [0.75, 0.75, 0.0]);
    }

    #[test]
    fn voxel_key_floors_negative_coordinates() {
        assert_eq!(voxel_key(&Point3::new(-0.01, 0.0, 0.99), 1.0), [-1, 0, 0]);
    }

    #[test]
    fn intersection_of_disjoint_boxes_is_none() {
        let a = Aabb::new([0.0; 3], [1.0; 3]);
        let b = Aabb::new([2.0; 3], [3.0; 3]);
        assert!(a.intersection(&b).is_none());
        assert_eq!(a.intersection(&a.padded(1.0)), Some(a));
    }
}
