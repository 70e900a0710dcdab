//! Exact k-nearest-neighbour search: a brute-force scan and a KD-tree.
//!
//! Feature weights are folded into the coordinates when a [`PointSet`] is
//! built (each dimension scaled by `sqrt(w)` for the Euclidean metric, by `w`
//! for the Manhattan one), so both backends search an unweighted space.
//! Results are ordered by `(distance, id)` everywhere; two backends given the
//! same points therefore return identical neighbour lists, ties included.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `sqrt(Σ w_d (p_d − q_d)²)`
    #[default]
    Euclidean,
    /// `Σ w_d |p_d − q_d|`
    Manhattan,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            "manhattan" | "l1" => Ok(Metric::Manhattan),
            other => Err(format!("unknown metric {other:?} (euclidean|manhattan)")),
        }
    }
}

impl Metric {
    fn scale_for(self, w: f64) -> f64 {
        match self {
            Metric::Euclidean => w.sqrt(),
            Metric::Manhattan => w,
        }
    }

    /// Monotone surrogate of the distance used for ordering.
    #[inline]
    fn key(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Metric::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }

    #[inline]
    fn key_to_distance(self, key: f64) -> f64 {
        match self {
            Metric::Euclidean => key.sqrt(),
            Metric::Manhattan => key,
        }
    }

    /// Smallest key between `q` and any point of the box `[lo, hi]`.
    ///
    /// Per-dimension gaps never exceed the matching gap of a point inside the
    /// box, and float addition is monotone, so this lower bound is exact in
    /// floating point, not just in real arithmetic.
    #[inline]
    fn box_key(self, q: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((&x, &l), &h) in q.iter().zip(lo).zip(hi) {
            let gap = if x < l {
                l - x
            } else if x > h {
                x - h
            } else {
                0.0
            };
            acc += match self {
                Metric::Euclidean => gap * gap,
                Metric::Manhattan => gap,
            };
        }
        acc
    }
}

/// Weighted distance in the original (unscaled) space.
pub fn weighted_distance(p: &[f64], q: &[f64], weights: &[f64], metric: Metric) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    debug_assert_eq!(p.len(), weights.len());
    match metric {
        Metric::Euclidean => p
            .iter()
            .zip(q)
            .zip(weights)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum::<f64>()
            .sqrt(),
        Metric::Manhattan => p
            .iter()
            .zip(q)
            .zip(weights)
            .map(|((a, b), w)| w * (a - b).abs())
            .sum(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

/// Points in a weight-scaled space, each tagged with a caller-chosen id.
#[derive(Debug, Clone)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
    ids: Vec<usize>,
    scale: Vec<f64>,
    metric: Metric,
}

impl PointSet {
    /// Unweighted Euclidean point set.
    pub fn new(dim: usize, coords: Vec<f64>, ids: Vec<usize>) -> Result<Self> {
        Self::weighted(dim, coords, ids, &vec![1.0; dim], Metric::Euclidean)
    }

    /// `coords` is row-major and unscaled; weights are folded in here.
    pub fn weighted(
        dim: usize,
        mut coords: Vec<f64>,
        ids: Vec<usize>,
        weights: &[f64],
        metric: Metric,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("point dimension must be at least 1"));
        }
        if coords.len() != dim * ids.len() {
            return Err(Error::Dimension {
                expected: dim * ids.len(),
                got: coords.len(),
            });
        }
        if weights.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid(format!("feature weight {w} must be positive")));
        }
        let mut seen = ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("point ids must be unique"));
        }
        let scale: Vec<f64> = weights.iter().map(|&w| metric.scale_for(w)).collect();
        if scale.iter().any(|&s| s != 1.0) {
            for row in coords.chunks_exact_mut(dim) {
                for (v, s) in row.iter_mut().zip(&scale) {
                    *v *= s;
                }
            }
        }
        Ok(PointSet {
            dim,
            coords,
            ids,
            scale,
            metric,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Coordinates of point `pos` in the scaled space.
    pub fn scaled_point(&self, pos: usize) -> &[f64] {
        &self.coords[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn scale_query(&self, query: &[f64]) -> Vec<f64> {
        query.iter().zip(&self.scale).map(|(q, s)| q * s).collect()
    }
}

/// Heap entry ordered by `(key, id)`; the max-heap top is the current worst.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    key: f64,
    id: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.total_cmp(&other.key).then(self.id.cmp(&other.id))
    }
}

struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(top) = self.heap.peek() {
            if c < *top {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    /// Prune only when a region is strictly worse than the current k-th best:
    /// an equal key could still win on id.
    #[inline]
    fn can_skip(&self, bound: f64) -> bool {
        self.heap.len() == self.k && self.heap.peek().is_some_and(|top| bound > top.key)
    }

    fn into_sorted(self, metric: Metric) -> Vec<Neighbor> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                id: c.id,
                distance: metric.key_to_distance(c.key),
            })
            .collect()
    }
}

/// Exact k-NN over an index, skipping ids rejected by `accept`.
pub trait NeighborIndex: Send + Sync {
    fn knn_filtered(&self, query: &[f64], k: usize, accept: &dyn Fn(usize) -> bool) -> Vec<Neighbor>;

    fn knn(&self, query: &[f64], k: usize) -> Vec<Neighbor> {
        self.knn_filtered(query, k, &|_| true)
    }

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The reference scan: `min(k, m)` neighbours ascending by `(distance, id)`.
pub fn brute_knn(query: &[f64], set: &PointSet, k: usize) -> Vec<Neighbor> {
    set.knn(query, k)
}

impl NeighborIndex for PointSet {
    fn knn_filtered(&self, query: &[f64], k: usize, accept: &dyn Fn(usize) -> bool) -> Vec<Neighbor> {
        assert_eq!(query.len(), self.dim, "query dimension");
        if k == 0 {
            return Vec::new();
        }
        let q = self.scale_query(query);
        let mut top = TopK::new(k);
        for (pos, &id) in self.ids.iter().enumerate() {
            if !accept(id) {
                continue;
            }
            let key = self.metric.key(&q, self.scaled_point(pos));
            top.offer(Candidate { key, id });
        }
        top.into_sorted(self.metric)
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRule {
    #[default]
    MaxSpread,
    Cyclic,
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { start: usize, end: usize },
    Split { left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    /// Offset of this node's `[lo..., hi...]` box in `KdTree::bounds`.
    bounds: usize,
}

/// Balanced KD-tree with median splits; immutable after build.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    metric: Metric,
    scale: Vec<f64>,
    /// Scaled coordinates permuted into leaf order.
    coords: Vec<f64>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
    bounds: Vec<f64>,
    leaf_size: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub nodes_visited: usize,
    pub points_examined: usize,
}

pub const DEFAULT_LEAF_SIZE: usize = 32;

pub fn kd_build(set: &PointSet, leaf_size: usize) -> Result<KdTree> {
    KdTree::build(set, leaf_size, SplitRule::MaxSpread)
}

impl KdTree {
    pub fn build(set: &PointSet, leaf_size: usize, rule: SplitRule) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::invalid("cannot build a KD-tree over an empty point set"));
        }
        let leaf_size = leaf_size.max(1);
        let dim = set.dim;
        let mut order: Vec<usize> = (0..set.len()).collect();
        let mut tree = KdTree {
            dim,
            metric: set.metric,
            scale: set.scale.clone(),
            coords: Vec::new(),
            ids: Vec::new(),
            nodes: Vec::new(),
            bounds: Vec::new(),
            leaf_size,
        };
        tree.build_node(set, &mut order, 0, 0, rule);
        tree.coords = Vec::with_capacity(set.coords.len());
        for &p in &order {
            tree.coords.extend_from_slice(set.scaled_point(p));
        }
        tree.ids = order.iter().map(|&p| set.ids[p]).collect();
        Ok(tree)
    }

    fn build_node(
        &mut self,
        set: &PointSet,
        order: &mut [usize],
        offset: usize,
        depth: usize,
        rule: SplitRule,
    ) -> usize {
        let dim = self.dim;
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &p in order.iter() {
            for (d, &v) in set.scaled_point(p).iter().enumerate() {
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
        let bounds = self.bounds.len();
        self.bounds.extend_from_slice(&lo);
        self.bounds.extend_from_slice(&hi);

        let id = self.nodes.len();
        self.nodes.push(Node {
            kind: NodeKind::Leaf {
                start: offset,
                end: offset + order.len(),
            },
            bounds,
        });
        if order.len() <= self.leaf_size {
            return id;
        }

        let split_dim = match rule {
            SplitRule::Cyclic => depth % dim,
            SplitRule::MaxSpread => (0..dim)
                .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
                .unwrap_or(0),
        };
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            set.scaled_point(a)[split_dim]
                .total_cmp(&set.scaled_point(b)[split_dim])
                .then(a.cmp(&b))
        });
        let (left_half, right_half) = order.split_at_mut(mid);
        let left = self.build_node(set, left_half, offset, depth + 1, rule);
        let right = self.build_node(set, right_half, offset + mid, depth + 1, rule);
        self.nodes[id].kind = NodeKind::Split { left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of nodes on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i].kind {
                NodeKind::Leaf { .. } => 1,
                NodeKind::Split { left, right } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Ids stored in each leaf, in tree order.
    pub fn leaves(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Leaf { start, end } => Some(self.ids[start..end].to_vec()),
                NodeKind::Split { .. } => None,
            })
            .collect()
    }

    /// Check that each node's box contains every point below it.
    pub fn bounds_hold(&self) -> bool {
        fn range(nodes: &[Node], i: usize) -> (usize, usize) {
            match nodes[i].kind {
                NodeKind::Leaf { start, end } => (start, end),
                NodeKind::Split { left, right } => (range(nodes, left).0, range(nodes, right).1),
            }
        }
        (0..self.nodes.len()).all(|i| {
            let (start, end) = range(&self.nodes, i);
            let b = self.nodes[i].bounds;
            let (lo, hi) = (&self.bounds[b..b + self.dim], &self.bounds[b + self.dim..b + 2 * self.dim]);
            (start..end).all(|p| {
                let x = &self.coords[p * self.dim..(p + 1) * self.dim];
                x.iter().zip(lo).zip(hi).all(|((v, l), h)| l <= v && v <= h)
            })
        })
    }

    fn node_box(&self, i: usize) -> (&[f64], &[f64]) {
        let b = self.nodes[i].bounds;
        (&self.bounds[b..b + self.dim], &self.bounds[b + self.dim..b + 2 * self.dim])
    }

    pub fn knn_with_stats(
        &self,
        query: &[f64],
        k: usize,
        accept: &dyn Fn(usize) -> bool,
    ) -> (Vec<Neighbor>, SearchStats) {
        assert_eq!(query.len(), self.dim, "query dimension");
        let mut stats = SearchStats::default();
        if k == 0 {
            return (Vec::new(), stats);
        }
        let q: Vec<f64> = query.iter().zip(&self.scale).map(|(v, s)| v * s).collect();
        let mut top = TopK::new(k);
        let (lo, hi) = self.node_box(0);
        let root_key = self.metric.box_key(&q, lo, hi);
        self.search(0, root_key, &q, &mut top, accept, &mut stats);
        (top.into_sorted(self.metric), stats)
    }

    fn search(
        &self,
        node: usize,
        node_key: f64,
        q: &[f64],
        top: &mut TopK,
        accept: &dyn Fn(usize) -> bool,
        stats: &mut SearchStats,
    ) {
        if top.can_skip(node_key) {
            return;
        }
        stats.nodes_visited += 1;
        match self.nodes[node].kind {
            NodeKind::Leaf { start, end } => {
                for p in start..end {
                    let id = self.ids[p];
                    if !accept(id) {
                        continue;
                    }
                    stats.points_examined += 1;
                    let key = self.metric.key(q, &self.coords[p * self.dim..(p + 1) * self.dim]);
                    top.offer(Candidate { key, id });
                }
            }
            NodeKind::Split { left, right } => {
                let (llo, lhi) = self.node_box(left);
                let (rlo, rhi) = self.node_box(right);
                let lk = self.metric.box_key(q, llo, lhi);
                let rk = self.metric.box_key(q, rlo, rhi);
                if lk <= rk {
                    self.search(left, lk, q, top, accept, stats);
                    self.search(right, rk, q, top, accept, stats);
                } else {
                    self.search(right, rk, q, top, accept, stats);
                    self.search(left, lk, q, top, accept, stats);
                }
            }
        }
    }
}

pub fn kd_knn(tree: &KdTree, query: &[f64], k: usize) -> Vec<Neighbor> {
    tree.knn(query, k)
}

impl NeighborIndex for KdTree {
    fn knn_filtered(&self, query: &[f64], k: usize, accept: &dyn Fn(usize) -> bool) -> Vec<Neighbor> {
        self.knn_with_stats(query, k, accept).0
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> Vec<f64> {
        (0..m * dim).map(|_| rng.gen::<f64>()).collect()
    }

    /// Independent double loop: full sort of every (distance, id) pair.
    fn naive(query: &[f64], coords: &[f64], dim: usize, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(f64, usize)> = coords
            .chunks(dim)
            .enumerate()
            .map(|(i, p)| {
                let mut s = 0.0;
                for d in 0..dim {
                    s += (p[d] - query[d]) * (p[d] - query[d]);
                }
                (s, i)
            })
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        all.truncate(k);
        all.into_iter().map(|(s, i)| (i, s.sqrt())).collect()
    }

    #[test]
    fn single_point() {
        let set = PointSet::new(2, vec![0.0, 0.0], vec![0]).unwrap();
        let r = brute_knn(&[1.0, 0.0], &set, 1);
        assert_eq!(r, vec![Neighbor { id: 0, distance: 1.0 }]);
        let tree = kd_build(&set, 4).unwrap();
        assert_eq!(tree.depth(), 1);
        assert_eq!(kd_knn(&tree, &[5.0, -3.0], 3)[0].id, 0);
    }

    #[test]
    fn stored_point_comes_first() {
        let set = PointSet::new(2, vec![0.0, 0.0, 1.0, 1.0, 0.5, 0.25], vec![10, 11, 12]).unwrap();
        let r = brute_knn(&[0.5, 0.25], &set, 2);
        assert_eq!(r[0], Neighbor { id: 12, distance: 0.0 });
    }

    #[test]
    fn empty_set_and_zero_k() {
        let set = PointSet::new(3, vec![], vec![]).unwrap();
        assert!(brute_knn(&[0.0; 3], &set, 4).is_empty());
        assert!(kd_build(&set, 8).is_err());
        let set = PointSet::new(1, vec![1.0], vec![0]).unwrap();
        assert!(brute_knn(&[0.0], &set, 0).is_empty());
    }

    #[test]
    fn brute_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coords = random_set(&mut rng, 200, 3);
        let set = PointSet::new(3, coords.clone(), (0..200).collect()).unwrap();
        for _ in 0..50 {
            let q: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
            let got: Vec<(usize, f64)> =
                brute_knn(&q, &set, 5).into_iter().map(|n| (n.id, n.distance)).collect();
            assert_eq!(got, naive(&q, &coords, 3, 5));
        }
    }

    #[test]
    fn kd_matches_brute_for_k_1_3_5() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = 10_000;
        let set = PointSet::new(4, random_set(&mut rng, m, 4), (0..m).collect()).unwrap();
        let tree = kd_build(&set, DEFAULT_LEAF_SIZE).unwrap();
        assert!(tree.bounds_hold());
        for k in [1, 3, 5] {
            for _ in 0..1_000 {
                let q: Vec<f64> = (0..4).map(|_| rng.gen()).collect();
                assert_eq!(kd_knn(&tree, &q, k), brute_knn(&q, &set, k));
            }
        }
    }

    #[test]
    fn duplicates_all_returned_before_farther_points() {
        let mut coords = [0.3, 0.3].repeat(40);
        coords.extend([0.9, 0.9, 0.0, 0.0]);
        let set = PointSet::new(2, coords, (0..42).collect()).unwrap();
        let tree = kd_build(&set, 4).unwrap();
        let r = kd_knn(&tree, &[0.31, 0.31], 41);
        assert!(r[..40].iter().all(|n| n.id < 40));
        let ids: Vec<usize> = r[..40].iter().map(|n| n.id).collect();
        assert_eq!(ids, (0..40).collect::<Vec<_>>());
        assert_eq!(r[40].id, 41);
        let leaf_total: usize = tree.leaves().iter().map(Vec::len).sum();
        assert_eq!(leaf_total, 42);
    }

    #[test]
    fn filter_skips_rejected_ids() {
        let set = PointSet::new(1, vec![0.0, 1.0, 2.0, 3.0], vec![0, 1, 2, 3]).unwrap();
        let tree = kd_build(&set, 1).unwrap();
        let accept = |id: usize| id != 0 && id != 1;
        let a = tree.knn_filtered(&[0.0], 1, &accept);
        let b = set.knn_filtered(&[0.0], 1, &accept);
        assert_eq!(a, b);
        assert_eq!(a[0].id, 2);
    }

    #[test]
    fn weighted_prescaling_matches_original_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for metric in [Metric::Euclidean, Metric::Manhattan] {
            let w: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..4.0)).collect();
            let coords = random_set(&mut rng, 100, 5);
            let set = PointSet::weighted(5, coords.clone(), (0..100).collect(), &w, metric).unwrap();
            let q: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
            for n in brute_knn(&q, &set, 100) {
                let p = &coords[n.id * 5..n.id * 5 + 5];
                let direct = weighted_distance(p, &q, &w, metric);
                assert!((n.distance - direct).abs() <= 1e-12, "{} vs {}", n.distance, direct);
            }
        }
    }

    #[test]
    fn weighted_distance_examples() {
        let w = [1.0, 1.0];
        assert_eq!(weighted_distance(&[0.2, 0.7], &[0.2, 0.7], &w, Metric::Euclidean), 0.0);
        assert_eq!(weighted_distance(&[0.0, 0.0], &[3.0, 4.0], &w, Metric::Euclidean), 5.0);
        let d = weighted_distance(&[0.0, 0.0], &[1.0, 1.0], &[4.0, 1.0], Metric::Euclidean);
        assert!((d - 5f64.sqrt()).abs() < 1e-12);
        assert_eq!(weighted_distance(&[0.0, 0.0], &[1.0, 1.0], &[4.0, 1.0], Metric::Manhattan), 5.0);
    }

    #[test]
    fn invalid_point_sets() {
        assert!(PointSet::new(2, vec![0.0; 3], vec![0, 1]).is_err());
        assert!(PointSet::new(1, vec![0.0, 1.0], vec![3, 3]).is_err());
        assert!(PointSet::weighted(1, vec![0.0], vec![0], &[0.0], Metric::Euclidean).is_err());
    }
}
