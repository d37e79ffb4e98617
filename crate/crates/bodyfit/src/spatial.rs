//! Exact nearest-neighbor queries over 3D point sets.
//!
//! A simple median-split kd-tree. All queries are exact; the fitting code
//! relies on that (correspondence searches are defined as exact nearest
//! neighbors, and candidate selection must match a brute-force scan).

use nalgebra::Point3;

/// Result of a nearest-neighbor query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Index of the point in the set the tree was built over (the caller's
    /// original index, not the tree's internal ordering).
    pub index: u32,
    /// Squared Euclidean distance to the query.
    pub distance_squared: f64,
}

struct Node {
    /// Split axis (0..3) for inner nodes.
    axis: u8,
    /// Split coordinate value.
    value: f64,
    /// Child node offsets; `u32::MAX` marks a leaf.
    left: u32,
    right: u32,
    /// Range into `order` for leaves.
    start: u32,
    end: u32,
}

/// Exact kd-tree over a set of labeled 3D points.
pub struct KdTree {
    points: Vec<Point3<f64>>,
    labels: Vec<u32>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: u32,
}

const LEAF_SIZE: usize = 16;
const NO_CHILD: u32 = u32::MAX;

impl KdTree {
    /// Builds a tree over `points`, where point `i` is reported as
    /// `labels[i]` in query results. Panics if lengths differ.
    pub fn with_labels(points: Vec<Point3<f64>>, labels: Vec<u32>) -> Self {
        assert_eq!(points.len(), labels.len(), "one label per point");
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree { points, labels, order: Vec::new(), nodes: Vec::new(), root: 0 };
        let n = tree.points.len();
        let root = if n == 0 { NO_CHILD } else { build(&tree.points, &mut order, 0, n, &mut tree.nodes) };
        tree.order = order;
        tree.root = root;
        tree
    }

    /// Builds a tree where labels are the point indices themselves.
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        let labels = (0..points.len() as u32).collect();
        Self::with_labels(points, labels)
    }

    /// Number of points in the tree.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// True when the tree holds no points.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exact nearest neighbor of `query`, or `None` for an empty tree.
    ///
    /// Distance ties are broken toward the lower label.
    pub fn nearest(&self, query: &Point3<f64>) -> Option<Neighbor> {
        if self.is_empty() {
            return None;
        }
        let mut best = Neighbor { index: u32::MAX, distance_squared: f64::INFINITY };
        self.search(self.root, query, &mut best);
        Some(best)
    }

    /// The `k` nearest neighbors of `query`, sorted by ascending distance
    /// (ties by ascending label). Returns fewer when the tree is smaller.
    pub fn k_nearest(&self, query: &Point3<f64>, k: usize) -> Vec<Neighbor> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut heap = KnnHeap::new(k);
        self.search_k(self.root, query, &mut heap);
        heap.into_sorted()
    }

    /// All points within Euclidean `radius` of `query` (unsorted).
    pub fn within_radius(&self, query: &Point3<f64>, radius: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if !self.is_empty() && radius >= 0.0 {
            self.search_radius(self.root, query, radius * radius, &mut out);
        }
        out
    }

    fn search(&self, node: u32, query: &Point3<f64>, best: &mut Neighbor) {
        let n = &self.nodes[node as usize];
        if n.left == NO_CHILD {
            for &i in &self.order[n.start as usize..n.end as usize] {
                let d2 = (self.points[i as usize] - query).norm_squared();
                let label = self.labels[i as usize];
                if d2 < best.distance_squared
                    || (d2 == best.distance_squared && label < best.index)
                {
                    *best = Neighbor { index: label, distance_squared: d2 };
                }
            }
            return;
        }
        let delta = query[n.axis as usize] - n.value;
        let (near, far) = if delta <= 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near, query, best);
        if delta * delta <= best.distance_squared {
            self.search(far, query, best);
        }
    }

    fn search_k(&self, node: u32, query: &Point3<f64>, heap: &mut KnnHeap) {
        let n = &self.nodes[node as usize];
        if n.left == NO_CHILD {
            for &i in &self.order[n.start as usize..n.end as usize] {
                let d2 = (self.points[i as usize] - query).norm_squared();
                heap.push(Neighbor { index: self.labels[i as usize], distance_squared: d2 });
            }
            return;
        }
        let delta = query[n.axis as usize] - n.value;
        let (near, far) = if delta <= 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search_k(near, query, heap);
        if delta * delta <= heap.bound() {
            self.search_k(far, query, heap);
        }
    }

    fn search_radius(&self, node: u32, query: &Point3<f64>, r2: f64, out: &mut Vec<Neighbor>) {
        let n = &self.nodes[node as usize];
        if n.left == NO_CHILD {
            for &i in &self.order[n.start as usize..n.end as usize] {
                let d2 = (self.points[i as usize] - query).norm_squared();
                if d2 <= r2 {
                    out.push(Neighbor { index: self.labels[i as usize], distance_squared: d2 });
                }
            }
            return;
        }
        let delta = query[n.axis as usize] - n.value;
        let (near, far) = if delta <= 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search_radius(near, query, r2, out);
        if delta * delta <= r2 {
            self.search_radius(far, query, r2, out);
        }
    }
}

fn build(points: &[Point3<f64>], order: &mut [u32], start: usize, end: usize, nodes: &mut Vec<Node>) -> u32 {
    if end - start <= LEAF_SIZE {
        nodes.push(Node {
            axis: 0,
            value: 0.0,
            left: NO_CHILD,
            right: NO_CHILD,
            start: start as u32,
            end: end as u32,
        });
        return (nodes.len() - 1) as u32;
    }
    // Split on the axis with the largest spread.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &order[start..end] {
        let p = &points[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    let value = points[order[mid] as usize][axis];
    let slot = nodes.len();
    nodes.push(Node { axis: axis as u8, value, left: 0, right: 0, start: 0, end: 0 });
    let left = build(points, order, start, mid, nodes);
    let right = build(points, order, mid, end, nodes);
    nodes[slot].left = left;
    nodes[slot].right = right;
    slot as u32
}

/// Bounded max-heap keeping the k best neighbors seen so far.
struct KnnHeap {
    k: usize,
    items: Vec<Neighbor>,
}

impl KnnHeap {
    fn new(k: usize) -> Self {
        KnnHeap { k, items: Vec::with_capacity(k + 1) }
    }

    /// Current pruning bound: worst kept distance once full.
    fn bound(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items.iter().map(|n| n.distance_squared).fold(f64::NEG_INFINITY, f64::max)
        }
    }

    fn push(&mut self, n: Neighbor) {
        if self.items.len() < self.k {
            self.items.push(n);
            return;
        }
        // Replace the worst item if the new one is better; ties keep the
        // lower label so results are independent of traversal order.
        let worst = self
            .items
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                a.distance_squared.total_cmp(&b.distance_squared).then(b.index.cmp(&a.index))
            })
            .map(|(i, _)| i)
            .unwrap();
        let w = self.items[worst];
        if n.distance_squared < w.distance_squared
            || (n.distance_squared == w.distance_squared && n.index < w.index)
        {
            self.items[worst] = n;
        }
    }

    fn into_sorted(mut self) -> Vec<Neighbor> {
        self.items.sort_by(|a, b| {
            a.distance_squared.total_cmp(&b.distance_squared).then(a.index.cmp(&b.index))
        });
        self.items
    }
}
