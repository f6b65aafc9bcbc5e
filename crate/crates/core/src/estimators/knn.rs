//! Exact Euclidean k-d tree.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const LEAF_SIZE: usize = 16;

enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

/// Exact nearest-neighbor index over the rows of a matrix.
pub struct KnnIndex {
    points: Tensor,
    order: Vec<usize>,
    root: Node,
}

/// Neighbor found by a query: squared distance and row index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub dist2: f64,
    pub index: usize,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Squared Euclidean distance, summed in coordinate order.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KnnIndex {
    pub fn new(points: Tensor) -> Result<Self> {
        if points.rank() != 2 || points.rows() == 0 {
            return Err(Error::Empty("k-d tree point set"));
        }
        if !points.all_finite() {
            return Err(Error::InvalidArgument("k-d tree points must be finite".into()));
        }
        let mut order: Vec<usize> = (0..points.rows()).collect();
        let n = order.len();
        let root = build(&points, &mut order, 0, n);
        Ok(Self { points, order, root })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    /// The `k` nearest rows to `query`, closest first, skipping row `exclude`.
    /// Ties are broken by row index.
    pub fn nearest(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(&self.root, query, k, exclude, &mut heap);
        }
        heap.into_sorted_vec()
    }

    fn search(&self, node: &Node, q: &[f64], k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Neighbor>) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let cand = Neighbor { dist2: squared_distance(q, self.points.row(i)), index: i };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap holds k entries") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                if heap.len() < k || diff * diff <= heap.peek().expect("nonempty").dist2 {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }

    /// Call `visit(index, dist2)` for every row with squared distance `<= radius2`.
    pub fn for_each_within(&self, query: &[f64], radius2: f64, mut visit: impl FnMut(usize, f64)) {
        self.range(&self.root, query, radius2, &mut visit);
    }

    fn range(&self, node: &Node, q: &[f64], r2: f64, visit: &mut impl FnMut(usize, f64)) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d2 = squared_distance(q, self.points.row(i));
                    if d2 <= r2 {
                        visit(i, d2);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.range(near, q, r2, visit);
                if diff * diff <= r2 {
                    self.range(far, q, r2, visit);
                }
            }
        }
    }
}

fn build(points: &Tensor, order: &mut [usize], start: usize, end: usize) -> Node {
    let slice = &mut order[start..end];
    if slice.len() <= LEAF_SIZE {
        return Node::Leaf { start, end };
    }
    let d = points.cols();
    let mut best = (0, f64::NEG_INFINITY);
    for j in 0..d {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in slice.iter() {
            let v = points.get(i, j);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo > best.1 {
            best = (j, hi - lo);
        }
    }
    let dim = best.0;
    if best.1 == 0.0 {
        return Node::Leaf { start, end };
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points.get(a, dim).total_cmp(&points.get(b, dim)));
    let value = points.get(slice[mid], dim);
    // Points equal to the pivot may sit on either side; queries use `<=` to stay exact.
    let left = build(points, order, start, start + mid);
    let right = build(points, order, start + mid, end);
    Node::Split { dim, value, left: Box::new(left), right: Box::new(right) }
}
