//! Exact 3-d kd-tree for neighbor queries. Axis cycles with depth, nodes
//! split at the median. Both queries prune with exact bounds, so results
//! match a brute-force scan (up to tie ordering, which `knn` breaks by
//! index).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub(crate) struct KdTree {
    pts: Vec<[f64; 3]>,
    nodes: Vec<Node>,
    root: i32,
}

struct Node {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

impl KdTree {
    pub fn build(pts: Vec<[f64; 3]>) -> Self {
        let mut order: Vec<u32> = (0..pts.len() as u32).collect();
        let mut tree = KdTree { pts, nodes: Vec::with_capacity(order.len()), root: -1 };
        let n = order.len();
        tree.root = tree.split(&mut order, 0, 0, n);
        tree
    }

    fn split(&mut self, order: &mut [u32], lo: usize, depth: usize, hi: usize) -> i32 {
        if lo >= hi {
            return -1;
        }
        let axis = (depth % 3) as u8;
        let mid = lo + (hi - lo) / 2;
        order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            let (pa, pb) = (self.pts[a as usize][axis as usize], self.pts[b as usize][axis as usize]);
            pa.partial_cmp(&pb).unwrap_or(Ordering::Equal).then(a.cmp(&b))
        });
        let point = order[mid];
        let id = self.nodes.len() as i32;
        self.nodes.push(Node { point, axis, left: -1, right: -1 });
        let left = self.split(order, lo, depth + 1, mid);
        let right = self.split(order, mid + 1, depth + 1, hi);
        self.nodes[id as usize].left = left;
        self.nodes[id as usize].right = right;
        id
    }

    /// k nearest neighbors of `query`, ascending by distance (ties by
    /// index), excluding `skip` when given. Returns fewer than k entries
    /// only if the tree runs out of points.
    pub fn knn(&self, query: [f64; 3], k: usize, skip: Option<usize>) -> Vec<(f64, usize)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<HeapItem> = BinaryHeap::with_capacity(k + 1);
        self.knn_visit(self.root, query, k, skip, &mut heap);
        let mut out: Vec<(f64, usize)> =
            heap.into_iter().map(|h| (h.dist2.sqrt(), h.index)).collect();
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out
    }

    fn knn_visit(
        &self,
        node: i32,
        query: [f64; 3],
        k: usize,
        skip: Option<usize>,
        heap: &mut BinaryHeap<HeapItem>,
    ) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = self.pts[n.point as usize];
        if skip != Some(n.point as usize) {
            let item = HeapItem { dist2: dist2(p, query), index: n.point as usize };
            // lexicographic (distance, index) eviction keeps the same set a
            // brute-force scan would, whatever the visit order
            if heap.len() < k {
                heap.push(item);
            } else if item < *heap.peek().unwrap() {
                heap.pop();
                heap.push(item);
            }
        }
        let axis = n.axis as usize;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.knn_visit(near, query, k, skip, heap);
        if heap.len() < k || delta * delta <= heap.peek().unwrap().dist2 {
            self.knn_visit(far, query, k, skip, heap);
        }
    }

    /// Indices of all points with ‖p − query‖ <= radius.
    pub fn within(&self, query: [f64; 3], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.within_visit(self.root, query, radius, &mut out);
        out
    }

    fn within_visit(&self, node: i32, query: [f64; 3], radius: f64, out: &mut Vec<usize>) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = self.pts[n.point as usize];
        if dist2(p, query) <= radius * radius {
            out.push(n.point as usize);
        }
        let delta = query[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.within_visit(near, query, radius, out);
        if delta.abs() <= radius {
            self.within_visit(far, query, radius, out);
        }
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

struct HeapItem {
    dist2: f64,
    index: usize,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.dist2 == other.dist2 && self.index == other.index
    }
}

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    // max-heap on (distance, index); index breaks ties so eviction is
    // deterministic
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .partial_cmp(&other.dist2)
            .unwrap_or(Ordering::Equal)
            .then(self.index.cmp(&other.index))
    }
}
