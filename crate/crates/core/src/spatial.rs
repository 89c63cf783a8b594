//! Static 3-D kd-tree for nearest-neighbor and radius queries.
//!
//! Built once over a point slice; indices returned refer to that slice.
//! Duplicated coordinates (organized grids) are fine: splits are by index
//! median, not by value.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let pts: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<usize> = (0..pts.len()).collect();
        let mut nodes = Vec::new();
        if !pts.is_empty() {
            build(&pts, &mut order, 0, pts.len(), &mut nodes);
        }
        Self { points: pts, order, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the closest point.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let q = [q.x, q.y, q.z];
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(0, &q, &mut best);
        Some(best)
    }

    /// Closest point within `radius`, if any.
    pub fn nearest_within(&self, q: &Vector3<f64>, radius: f64) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let q = [q.x, q.y, q.z];
        let mut best = (usize::MAX, radius * radius);
        self.nearest_rec(0, &q, &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    /// `k` nearest points sorted by distance (index, squared distance).
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        if self.nodes.is_empty() || k == 0 {
            return Vec::new();
        }
        let q = [q.x, q.y, q.z];
        let mut heap: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        self.knn_rec(0, &q, k, &mut heap);
        heap
    }

    /// All points within `radius` (unsorted).
    pub fn within(&self, q: &Vector3<f64>, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let q = [q.x, q.y, q.z];
        self.within_rec(0, &q, radius * radius, &mut out);
        out
    }

    fn nearest_rec(&self, node: usize, q: &[f64; 3], best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(&self.points[i], q);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best);
                if diff * diff <= best.1 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    fn knn_rec(&self, node: usize, q: &[f64; 3], k: usize, heap: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(&self.points[i], q);
                    if heap.len() < k || d < heap[heap.len() - 1].1 {
                        let pos = heap.partition_point(|e| e.1 < d || (e.1 == d && e.0 < i));
                        heap.insert(pos, (i, d));
                        heap.truncate(k);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap[heap.len() - 1].1 {
                    self.knn_rec(far, q, k, heap);
                }
            }
        }
    }

    fn within_rec(&self, node: usize, q: &[f64; 3], r2: f64, out: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(&self.points[i], q);
                    if d <= r2 {
                        out.push((i, d));
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                if diff <= 0.0 || diff * diff <= r2 {
                    self.within_rec(left, q, r2, out);
                }
                if diff >= 0.0 || diff * diff <= r2 {
                    self.within_rec(right, q, r2, out);
                }
            }
        }
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn build(pts: &[[f64; 3]], order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    // split along the widest extent
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &order[start..end] {
        for a in 0..3 {
            lo[a] = lo[a].min(pts[i][a]);
            hi[a] = hi[a].max(pts[i][a]);
        }
    }
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
    if hi[axis] - lo[axis] == 0.0 {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
    let value = pts[order[mid]][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let left = build(pts, order, start, mid, nodes);
    let right = build(pts, order, mid, end, nodes);
    nodes[id] = Node::Split { axis, value, left, right };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nearest(pts: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
        pts.iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .unwrap()
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<_> = (0..2000)
            .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)))
            .collect();
        let tree = KdTree::new(&pts);
        for _ in 0..200 {
            let q = Vector3::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-2.0..2.0));
            let (i, d) = tree.nearest(&q).unwrap();
            let (bi, bd) = brute_nearest(&pts, &q);
            assert_eq!(d, bd);
            assert_eq!(i, bi);
            let mut within: Vec<_> = tree.within(&q, 1.0).into_iter().map(|e| e.0).collect();
            within.sort();
            let brute: Vec<_> = (0..pts.len()).filter(|&j| (pts[j] - q).norm_squared() <= 1.0).collect();
            assert_eq!(within, brute);
            let knn = tree.knn(&q, 7);
            let mut all: Vec<_> = pts.iter().map(|p| (p - q).norm_squared()).collect();
            all.sort_by(|a, b| a.total_cmp(b));
            for (k, e) in knn.iter().enumerate() {
                assert_eq!(e.1, all[k]);
            }
        }
    }

    #[test]
    fn handles_grid_duplicates() {
        let pts: Vec<_> = (0..100 * 100)
            .map(|i| Vector3::new((i % 100) as f64 * 0.05, (i / 100) as f64 * 0.05, 0.0))
            .collect();
        let tree = KdTree::new(&pts);
        let (i, d) = tree.nearest(&Vector3::new(1.001, 2.0, 0.0)).unwrap();
        assert!(d < 1e-5);
        assert_eq!(i, 40 * 100 + 20);
        assert!(tree.nearest_within(&Vector3::new(100.0, 0.0, 0.0), 1.0).is_none());
    }
}
