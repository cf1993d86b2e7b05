//! Static 3-D kd-tree over a point set.
//!
//! Distances are squared Euclidean. Ties are broken by the smaller point
//! index, so callers that order their points get a deterministic choice.

use crate::Vec3;

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
    points: Vec<Vec3>,
    /// Point indices permuted so each leaf owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    fn precedes(&self, other: &Neighbor) -> bool {
        self.dist2 < other.dist2 || (self.dist2 == other.dist2 && self.index < other.index)
    }
}

impl KdTree {
    pub fn new(points: Vec<Vec3>) -> Self {
        let mut tree = KdTree {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            let n = tree.points.len();
            tree.build(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Nearest point to `q`, ties resolved toward the smaller index.
    pub fn nearest(&self, q: &Vec3) -> Option<Neighbor> {
        let mut best = self.knn(q, 1);
        best.pop()
    }

    /// The `k` nearest points ordered by (distance, index).
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<Neighbor> {
        let mut out: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return out;
        }
        self.search(0, q, k, &mut out);
        out
    }

    fn search(&self, node: usize, q: &Vec3, k: usize, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &index in &self.order[start..end] {
                    let cand = Neighbor {
                        index,
                        dist2: (self.points[index] - q).norm_squared(),
                    };
                    if out.len() == k && !cand.precedes(&out[k - 1]) {
                        continue;
                    }
                    let pos = out.partition_point(|n| n.precedes(&cand));
                    out.insert(pos, cand);
                    out.truncate(k);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = q[axis] - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, out);
                // Equal-distance candidates on the far side must still be visited
                // for the index tie rule to hold.
                if out.len() < k || delta * delta <= out[k - 1].dist2 {
                    self.search(far, q, k, out);
                }
            }
        }
    }

    /// All points within `radius` of `q`, ordered by (distance, index).
    pub fn within(&self, q: &Vec3, radius: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if !self.points.is_empty() {
            self.collect_within(0, q, radius * radius, &mut out);
        }
        out.sort_by(|a, b| a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index)));
        out
    }

    fn collect_within(&self, node: usize, q: &Vec3, r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &index in &self.order[start..end] {
                    let dist2 = (self.points[index] - q).norm_squared();
                    if dist2 <= r2 {
                        out.push(Neighbor { index, dist2 });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = q[axis] - value;
                if delta <= 0.0 || delta * delta <= r2 {
                    self.collect_within(left, q, r2, out);
                }
                if delta >= 0.0 || delta * delta <= r2 {
                    self.collect_within(right, q, r2, out);
                }
            }
        }
    }
}
