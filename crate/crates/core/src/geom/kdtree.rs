use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::Point;

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Balanced k-d tree over a fixed point set.
///
/// Immutable after construction. Query results are exact: `knn` returns the
/// `k` smallest `(distance, id)` pairs, `radius_search` every id within the
/// (closed) radius, sorted by id.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<Point>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

#[derive(PartialEq)]
struct Candidate {
    dist2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    pub const DEFAULT_LEAF_SIZE: usize = 12;

    pub fn new(points: &[Point]) -> Self {
        Self::with_leaf_size(points, Self::DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(points: &[Point], leaf_size: usize) -> Self {
        let leaf_size = leaf_size.max(1);
        let mut index = Self {
            points: points.to_vec(),
            perm: (0..points.len()).collect(),
            nodes: Vec::new(),
            leaf_size,
        };
        if !points.is_empty() {
            index.build(0, points.len());
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let slot = self.nodes.len();
        if end - start <= self.leaf_size {
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.perm[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[slot] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.perm[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0)
    }

    /// The `k` nearest ids by Euclidean distance, nearest first; ties go to
    /// the lower id. Returns every point when `k` exceeds the point count.
    pub fn knn(&self, query: &Point, k: usize) -> Vec<usize> {
        self.knn_with_distances(query, k)
            .into_iter()
            .map(|(id, _)| id)
            .collect()
    }

    /// Like [`knn`](Self::knn), paired with squared distances.
    pub fn knn_with_distances(&self, query: &Point, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_node(0, query, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.id, c.dist2)).collect()
    }

    /// Nearest id and its squared distance.
    pub fn nearest(&self, query: &Point) -> Option<(usize, f64)> {
        self.knn_with_distances(query, 1).into_iter().next()
    }

    fn knn_node(&self, node: usize, q: &Point, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.perm[start..end] {
                    let cand = Candidate {
                        dist2: (self.points[id] - q).norm_squared(),
                        id,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if let Some(worst) = heap.peek() {
                        if cand < *worst {
                            heap.pop();
                            heap.push(cand);
                        }
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_node(near, q, k, heap);
                let plane = diff * diff;
                let visit_far = heap.len() < k || heap.peek().is_some_and(|w| plane <= w.dist2);
                if visit_far {
                    self.knn_node(far, q, k, heap);
                }
            }
        }
    }

    /// All ids with distance `<= radius`, sorted by id.
    pub fn radius_search(&self, query: &Point, radius: f64) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .radius_search_with_distances(query, radius)
            .into_iter()
            .map(|(id, _)| id)
            .collect();
        out.sort_unstable();
        out
    }

    /// Unordered `(id, squared distance)` pairs within `radius`.
    pub fn radius_search_with_distances(&self, query: &Point, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if self.points.is_empty() || !(radius >= 0.0) {
            return out;
        }
        self.radius_node(0, query, radius * radius, &mut out);
        out
    }

    fn radius_node(&self, node: usize, q: &Point, r2: f64, out: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.perm[start..end] {
                    let d2 = (self.points[id] - q).norm_squared();
                    if d2 <= r2 {
                        out.push((id, d2));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.radius_node(near, q, r2, out);
                if diff * diff <= r2 {
                    self.radius_node(far, q, r2, out);
                }
            }
        }
    }
}
