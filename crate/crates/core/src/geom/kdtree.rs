use nalgebra::Vector3;

use crate::error::{Error, Result};

const DEFAULT_LEAF_SIZE: usize = 16;

enum Node {
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        start: usize,
        end: usize,
    },
}

/// Balanced kd-tree over a fixed point set. Immutable after construction;
/// queries are read-only and exact (results match a linear scan, ties broken
/// by ascending point index).
pub struct SpatialIndex {
    points: Vec<Vector3<f64>>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
    root: usize,
    leaf_size: usize,
}

/// Max-heap entry; the "worst" candidate is the largest (dist2, index) pair,
/// so equal distances prefer the lower index.
#[derive(PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl SpatialIndex {
    pub fn build(points: &[Vector3<f64>]) -> Result<Self> {
        Self::with_leaf_size(points, DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(points: &[Vector3<f64>], leaf_size: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("spatial index needs at least one point"));
        }
        let leaf_size = leaf_size.max(1);
        let mut perm: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        let n = points.len();
        let root = build_node(points, &mut perm, &mut nodes, 0, n, 0, leaf_size);
        Ok(Self {
            points: points.to_vec(),
            perm,
            nodes,
            root,
            leaf_size,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    /// Exact k-nearest-neighbor query. Returns (point index, distance) sorted
    /// by ascending distance, ties by ascending index.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        if k > self.points.len() {
            return Err(Error::InvalidArgument(format!(
                "knn: k={} exceeds point count {}",
                k,
                self.points.len()
            )));
        }
        let mut heap: std::collections::BinaryHeap<Candidate> =
            std::collections::BinaryHeap::with_capacity(k + 1);
        self.search(self.root, query, k, &mut heap);
        let mut out: Vec<(usize, f64)> = heap
            .into_iter()
            .map(|c| (c.index, c.dist2.sqrt()))
            .collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Ok(out)
    }

    fn search(
        &self,
        node: usize,
        query: &Vector3<f64>,
        k: usize,
        heap: &mut std::collections::BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &idx in &self.perm[start..end] {
                    let dist2 = (self.points[idx] - query).norm_squared();
                    let cand = Candidate { index: idx, dist2 };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, heap);
                // The far side may still hold ties with lower indices, so only
                // prune on a strictly larger plane distance.
                let plane_dist2 = diff * diff;
                let must_visit = heap.len() < k || plane_dist2 <= heap.peek().unwrap().dist2;
                if must_visit {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}

fn build_node(
    points: &[Vector3<f64>],
    perm: &mut [usize],
    nodes: &mut Vec<Node>,
    start: usize,
    end: usize,
    depth: usize,
    leaf_size: usize,
) -> usize {
    let len = end - start;
    if len <= leaf_size {
        nodes.push(Node::Leaf { start, end });
        return nodes.len() - 1;
    }
    let axis = depth % 3;
    let mid = len / 2;
    perm[start..end].select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let value = points[perm[start + mid]][axis];
    let left = build_node(points, perm, nodes, start, start + mid, depth + 1, leaf_size);
    let right = build_node(points, perm, nodes, start + mid, end, depth + 1, leaf_size);
    nodes.push(Node::Split {
        axis,
        value,
        left,
        right,
    });
    nodes.len() - 1
}
