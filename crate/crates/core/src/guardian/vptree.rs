//! Vantage-point tree for exact k-nearest-neighbor search under the
//! Euclidean metric.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(Vec<usize>),
    Split { vantage: usize, radius: f64, inside: Box<Node>, outside: Box<Node> },
}

/// Index over `n` points of dimension `dim` stored row-major in `points`.
#[derive(Debug, Clone, PartialEq)]
pub struct VpTree {
    dim: usize,
    points: Vec<f64>,
    root: Node,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.idx.cmp(&other.idx))
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl VpTree {
    /// Builds the tree. Vantage points are the first point of each subset,
    /// so construction is deterministic in the input order.
    pub fn build(points: Vec<f64>, dim: usize) -> Self {
        assert!(dim > 0 && points.len().is_multiple_of(dim), "points must be a multiple of dim");
        let n = points.len() / dim;
        let mut idx: Vec<usize> = (0..n).collect();
        let root = Self::build_node(&points, dim, &mut idx);
        Self { dim, points, root }
    }

    fn point(points: &[f64], dim: usize, i: usize) -> &[f64] {
        &points[i * dim..(i + 1) * dim]
    }

    fn build_node(points: &[f64], dim: usize, idx: &mut [usize]) -> Node {
        if idx.len() <= LEAF_SIZE {
            return Node::Leaf(idx.to_vec());
        }
        let vantage = idx[0];
        let vp = Self::point(points, dim, vantage);
        let rest = &mut idx[1..];
        let mut keyed: Vec<(f64, usize)> = rest.iter().map(|&i| (euclidean(vp, Self::point(points, dim, i)), i)).collect();
        let mid = keyed.len() / 2;
        keyed.select_nth_unstable_by(mid, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let radius = keyed[mid].0;
        for (slot, (_, i)) in rest.iter_mut().zip(&keyed) {
            *slot = *i;
        }
        let (inner, outer) = rest.split_at_mut(mid);
        Node::Split {
            vantage,
            radius,
            inside: Box::new(Self::build_node(points, dim, inner)),
            outside: Box::new(Self::build_node(points, dim, outer)),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// The `k` nearest points as `(distance, index)`, nearest first; ties
    /// broken by index.
    pub fn knn(&self, query: &[f64], k: usize) -> Vec<(f64, usize)> {
        assert_eq!(query.len(), self.dim, "query dimension");
        let k = k.min(self.len());
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(&self.root, query, k, &mut heap);
        }
        let mut out: Vec<(f64, usize)> = heap.into_iter().map(|c| (c.dist, c.idx)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    fn offer(heap: &mut BinaryHeap<Candidate>, k: usize, c: Candidate) {
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().expect("non-empty heap") {
            heap.pop();
            heap.push(c);
        }
    }

    fn bound(heap: &BinaryHeap<Candidate>, k: usize) -> f64 {
        if heap.len() < k {
            f64::INFINITY
        } else {
            heap.peek().map_or(f64::INFINITY, |c| c.dist)
        }
    }

    fn search(&self, node: &Node, q: &[f64], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match node {
            Node::Leaf(items) => {
                for &i in items {
                    let dist = euclidean(q, Self::point(&self.points, self.dim, i));
                    Self::offer(heap, k, Candidate { dist, idx: i });
                }
            }
            Node::Split { vantage, radius, inside, outside } => {
                let d = euclidean(q, Self::point(&self.points, self.dim, *vantage));
                Self::offer(heap, k, Candidate { dist: d, idx: *vantage });
                // visit the side containing q first
                let (first, second) = if d < *radius { (inside, outside) } else { (outside, inside) };
                self.search(first, q, k, heap);
                let tau = Self::bound(heap, k);
                let needs_second = if d < *radius { d + tau >= *radius } else { d - tau <= *radius };
                if needs_second {
                    self.search(second, q, k, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn brute(points: &[f64], dim: usize, q: &[f64], k: usize) -> Vec<(f64, usize)> {
        let mut all: Vec<(f64, usize)> =
            points.chunks(dim).enumerate().map(|(i, p)| (euclidean(q, p), i)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = rng_from(11);
        for &(n, dim, k) in &[(1usize, 3usize, 1usize), (50, 2, 5), (400, 8, 17), (300, 73, 100), (40, 4, 40)] {
            let pts: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let tree = VpTree::build(pts.clone(), dim);
            for _ in 0..10 {
                let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
                assert_eq!(tree.knn(&q, k), brute(&pts, dim, &q, k));
            }
        }
    }

    #[test]
    fn duplicate_points_are_all_returned() {
        let pts = vec![1.0; 3 * 40];
        let tree = VpTree::build(pts, 3);
        let r = tree.knn(&[1.0, 1.0, 1.0], 40);
        assert_eq!(r.len(), 40);
        assert!(r.iter().all(|(d, _)| *d == 0.0));
    }
}
