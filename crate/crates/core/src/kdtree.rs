//! Exact 3-D kd-tree over a fixed point set.
//!
//! Ties in distance are broken by the lower point index, so results are
//! identical to a linear scan that keeps the first minimum.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
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

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Original indices in leaf order.
    order: Vec<usize>,
    /// `points` permuted into leaf order, so leaves scan contiguous memory.
    leaf_points: Vec<Vector3<f64>>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist_sq: f64,
    index: usize,
}

impl Candidate {
    fn better_than(&self, other: &Self) -> bool {
        self.dist_sq < other.dist_sq || (self.dist_sq == other.dist_sq && self.index < other.index)
    }
}

impl KdTree {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        if !points.is_empty() {
            build(&points, &mut order, 0, points.len(), &mut nodes);
        }
        let leaf_points = order.iter().map(|&i| points[i]).collect();
        Self {
            points,
            order,
            leaf_points,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Nearest point as `(index, squared distance)`.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<(usize, f64)> {
        self.nearest_within(query, f64::INFINITY)
    }

    /// Nearest point with squared distance at most `max_dist_sq`. Returns the
    /// same answer as [`KdTree::nearest`] whenever that answer is in range.
    pub fn nearest_within(&self, query: &Vector3<f64>, max_dist_sq: f64) -> Option<(usize, f64)> {
        if self.is_empty() {
            return None;
        }
        let mut best = Candidate {
            dist_sq: max_dist_sq,
            index: usize::MAX,
        };
        self.nearest_in(0, query, 0.0, &mut [0.0; 3], &mut best);
        (best.index != usize::MAX).then_some((best.index, best.dist_sq))
    }

    /// `rd` is a lower bound on the squared distance from `q` to the cell of
    /// `node`, built from the per-axis offsets in `off`.
    fn nearest_in(
        &self,
        node: usize,
        q: &Vector3<f64>,
        rd: f64,
        off: &mut [f64; 3],
        best: &mut Candidate,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for (p, &i) in self.leaf_points[start..end]
                    .iter()
                    .zip(&self.order[start..end])
                {
                    let c = Candidate {
                        dist_sq: (p - q).norm_squared(),
                        index: i,
                    };
                    if c.better_than(best) {
                        *best = c;
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
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.nearest_in(near, q, rd, off, best);
                let old = off[axis];
                let far_rd = rd - old * old + diff * diff;
                if far_rd <= best.dist_sq {
                    off[axis] = diff;
                    self.nearest_in(far, q, far_rd, off, best);
                    off[axis] = old;
                }
            }
        }
    }

    /// The `k` nearest points sorted by `(distance, index)`.
    pub fn k_nearest(&self, query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut found = Vec::with_capacity(k + 1);
        self.knn_in(0, query, k, 0.0, &mut [0.0; 3], &mut found);
        found.into_iter().map(|c| (c.index, c.dist_sq)).collect()
    }

    /// `found` stays sorted best-first and holds at most `k` entries.
    fn knn_in(
        &self,
        node: usize,
        q: &Vector3<f64>,
        k: usize,
        rd: f64,
        off: &mut [f64; 3],
        found: &mut Vec<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for (p, &i) in self.leaf_points[start..end]
                    .iter()
                    .zip(&self.order[start..end])
                {
                    let c = Candidate {
                        dist_sq: (p - q).norm_squared(),
                        index: i,
                    };
                    if found.len() == k && !c.better_than(&found[k - 1]) {
                        continue;
                    }
                    let at = found.partition_point(|x| x.better_than(&c));
                    found.insert(at, c);
                    found.truncate(k);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_in(near, q, k, rd, off, found);
                let old = off[axis];
                let far_rd = rd - old * old + diff * diff;
                let bound = if found.len() < k {
                    f64::INFINITY
                } else {
                    found[k - 1].dist_sq
                };
                if far_rd <= bound {
                    off[axis] = diff;
                    self.knn_in(far, q, k, far_rd, off, found);
                    off[axis] = old;
                }
            }
        }
    }
}

fn build(
    points: &[Vector3<f64>],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &mut order[start..end];
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in slice.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    if !(hi[axis] > lo[axis]) {
        // All points coincide.
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let value = points[slice[mid]][axis];
    // Points equal to `value` may sit on either side; queries visit both sides when
    // the split plane is within the current bound, so correctness is unaffected.
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let left = build(points, order, start, start + mid, nodes);
    let right = build(points, order, start + mid, end, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}
