//! Exact nearest-neighbour search over 3D points.
//!
//! A static kd-tree stored implicitly over a permutation of point indices:
//! the subtree for index range `[lo, hi)` splits at `mid = (lo + hi) / 2` on
//! the axis recorded in `axes[mid]`. Distances compare as `(dist², index)`
//! pairs, so ties always resolve to the lowest point index.

use nalgebra::Point3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    perm: Vec<u32>,
    axes: Vec<u8>,
}

/// A neighbour hit: index into the original point list and squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Neighbor {
    fn key(&self) -> (f64, usize) {
        (self.dist_sq, self.index)
    }

    fn before(&self, other: &Neighbor) -> bool {
        self.key() < other.key()
    }
}

impl KdTree {
    pub fn new(points: &[Point3<f64>]) -> Self {
        assert!(points.len() < u32::MAX as usize, "too many points for the index");
        let points: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut perm: Vec<u32> = (0..points.len() as u32).collect();
        let mut axes = vec![0u8; points.len()];
        build(&points, &mut perm, &mut axes);
        Self { points, perm, axes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Closest point to `q`, ties broken by lowest index.
    pub fn nearest(&self, q: &Point3<f64>) -> Option<Neighbor> {
        let mut best: Option<Neighbor> = None;
        self.nearest_in(&[q.x, q.y, q.z], 0, self.perm.len(), &mut best);
        best
    }

    /// The `k` closest points to `q` ordered by `(distance, index)`.
    ///
    /// `exclude` skips one point index, typically the query point itself.
    pub fn knn(&self, q: &Point3<f64>, k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut heap = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_in(&[q.x, q.y, q.z], k, exclude, 0, self.perm.len(), &mut heap);
        }
        heap
    }

    fn dist_sq(&self, i: usize, q: &[f64; 3]) -> f64 {
        let p = &self.points[i];
        let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    }

    fn nearest_in(&self, q: &[f64; 3], lo: usize, hi: usize, best: &mut Option<Neighbor>) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.perm[lo..hi] {
                let cand = Neighbor {
                    index: i as usize,
                    dist_sq: self.dist_sq(i as usize, q),
                };
                if best.is_none_or(|b| cand.before(&b)) {
                    *best = Some(cand);
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = self.axes[mid] as usize;
        let pivot = self.perm[mid] as usize;
        let cand = Neighbor {
            index: pivot,
            dist_sq: self.dist_sq(pivot, q),
        };
        if best.is_none_or(|b| cand.before(&b)) {
            *best = Some(cand);
        }
        let diff = q[axis] - self.points[pivot][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_in(q, near.0, near.1, best);
        // `<=` keeps equal-distance candidates reachable for the index tie-break.
        if best.is_none_or(|b| diff * diff <= b.dist_sq) {
            self.nearest_in(q, far.0, far.1, best);
        }
    }

    fn offer(heap: &mut Vec<Neighbor>, k: usize, cand: Neighbor) {
        if heap.len() == k && !cand.before(heap.last().unwrap()) {
            return;
        }
        let pos = heap.partition_point(|n| n.before(&cand));
        heap.insert(pos, cand);
        heap.truncate(k);
    }

    fn knn_in(
        &self,
        q: &[f64; 3],
        k: usize,
        exclude: Option<usize>,
        lo: usize,
        hi: usize,
        heap: &mut Vec<Neighbor>,
    ) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.perm[lo..hi] {
                let i = i as usize;
                if Some(i) != exclude {
                    Self::offer(heap, k, Neighbor { index: i, dist_sq: self.dist_sq(i, q) });
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = self.axes[mid] as usize;
        let pivot = self.perm[mid] as usize;
        if Some(pivot) != exclude {
            Self::offer(heap, k, Neighbor { index: pivot, dist_sq: self.dist_sq(pivot, q) });
        }
        let diff = q[axis] - self.points[pivot][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_in(q, k, exclude, near.0, near.1, heap);
        if heap.len() < k || diff * diff <= heap.last().unwrap().dist_sq {
            self.knn_in(q, k, exclude, far.0, far.1, heap);
        }
    }
}

fn build(points: &[[f64; 3]], perm: &mut [u32], axes: &mut [u8]) {
    let n = perm.len();
    if n <= LEAF_SIZE {
        return;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in perm.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i as usize][a]);
            hi[a] = hi[a].max(points[i as usize][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    let mid = n / 2;
    perm.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    axes[mid] = axis as u8;
    let (left, right) = perm.split_at_mut(mid);
    let (axes_left, axes_right) = axes.split_at_mut(mid);
    build(points, left, axes_left);
    build(points, &mut right[1..], &mut axes_right[1..]);
}
