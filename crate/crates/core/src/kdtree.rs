//! Exact k-nearest queries under the power score `½|w − p_i|² − h_i`.
//!
//! Scores are lifted into d+1 dimensions, `p_i' = (p_i, sqrt(C − 2h_i))` with
//! `C = max 2h_i`, so that `½|w' − p_i'|² − C/2` equals the power score for a
//! query `w' = (w, 0)`. The tree prunes on lifted box distances and evaluates
//! leaves with the direct formula, so results match a brute-force scan,
//! including the lowest-index tie break.

use crate::geometry::sq_dist;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy)]
struct Node {
    start: u32,
    end: u32,
    // children, 0 = leaf (root is never a child)
    left: u32,
    right: u32,
}

#[derive(Debug, Clone)]
pub struct PowerIndex {
    dim: usize,
    // point coordinates permuted into tree order
    coords: Vec<f64>,
    offsets: Vec<f64>,
    ids: Vec<usize>,
    half_c: f64,
    nodes: Vec<Node>,
    // per node: lo[0..=dim] then hi[0..=dim] in lifted coordinates
    bounds: Vec<f64>,
}

impl PowerIndex {
    /// `points` is row-major with `dim` columns; `offsets[i]` is `h_i`.
    pub fn new(dim: usize, points: &[f64], offsets: &[f64]) -> Self {
        let n = offsets.len();
        assert_eq!(points.len(), n * dim);
        let c = offsets.iter().fold(f64::NEG_INFINITY, |m, &h| m.max(2.0 * h));
        let c = if n == 0 { 0.0 } else { c };
        let lifted_dim = dim + 1;
        let mut lifted = vec![0.0; n * lifted_dim];
        for i in 0..n {
            lifted[i * lifted_dim..i * lifted_dim + dim]
                .copy_from_slice(&points[i * dim..(i + 1) * dim]);
            lifted[i * lifted_dim + dim] = (c - 2.0 * offsets[i]).max(0.0).sqrt();
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::new();
        let mut bounds = Vec::new();
        if n > 0 {
            build(&lifted, lifted_dim, &mut order, 0, n, &mut nodes, &mut bounds);
        }
        let mut coords = Vec::with_capacity(n * dim);
        let mut offs = Vec::with_capacity(n);
        for &i in &order {
            coords.extend_from_slice(&points[i * dim..(i + 1) * dim]);
            offs.push(offsets[i]);
        }
        PowerIndex {
            dim,
            coords,
            offsets: offs,
            ids: order,
            half_c: 0.5 * c,
            nodes,
            bounds,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index minimizing the power score; lowest index among exact ties.
    pub fn nearest(&self, w: &[f64]) -> usize {
        let mut best = [(f64::INFINITY, usize::MAX)];
        self.search(w, &mut best);
        best[0].1
    }

    /// Best and second-best `(score, index)`; the second is
    /// `(∞, usize::MAX)` for a single point.
    pub fn nearest_two(&self, w: &[f64]) -> [(f64, usize); 2] {
        let mut best = [(f64::INFINITY, usize::MAX); 2];
        self.search(w, &mut best);
        best
    }

    /// Lowest-scoring `(score, index)` with score below `bound`, if any.
    pub fn nearest_below(&self, w: &[f64], bound: f64) -> Option<(f64, usize)> {
        let mut best = [(bound, usize::MAX)];
        self.search(w, &mut best);
        (best[0].1 != usize::MAX).then_some(best[0])
    }

    /// The `k` lowest `(score, index)` pairs in ascending order.
    pub fn k_nearest(&self, w: &[f64], k: usize) -> Vec<(f64, usize)> {
        let k = k.min(self.len());
        let mut best = vec![(f64::INFINITY, usize::MAX); k];
        if k > 0 {
            self.search(w, &mut best);
        }
        best
    }

    fn search(&self, w: &[f64], best: &mut [(f64, usize)]) {
        debug_assert_eq!(w.len(), self.dim);
        if self.nodes.is_empty() {
            return;
        }
        // depth-first; at most one pending sibling per tree level
        let mut stack = [(0usize, 0.0f64); 96];
        let mut top = 1;
        stack[0] = (0, self.lower_bound(0, w));
        while top > 0 {
            top -= 1;
            let (ni, lb) = stack[top];
            let worst = best[best.len() - 1].0;
            if lb > worst + slack(worst, self.half_c) {
                continue;
            }
            let node = self.nodes[ni];
            if node.left == 0 {
                for slot in node.start as usize..node.end as usize {
                    let p = &self.coords[slot * self.dim..(slot + 1) * self.dim];
                    let score = 0.5 * sq_dist(w, p) - self.offsets[slot];
                    insert(best, (score, self.ids[slot]));
                }
            } else {
                let (l, r) = (node.left as usize, node.right as usize);
                let lbl = self.lower_bound(l, w);
                let lbr = self.lower_bound(r, w);
                // push the farther child first so the nearer is explored first
                let (far, near) = if lbl <= lbr {
                    ((r, lbr), (l, lbl))
                } else {
                    ((l, lbl), (r, lbr))
                };
                stack[top] = far;
                stack[top + 1] = near;
                top += 2;
            }
        }
    }

    fn lower_bound(&self, ni: usize, w: &[f64]) -> f64 {
        let ld = self.dim + 1;
        let lo = &self.bounds[2 * ld * ni..2 * ld * ni + ld];
        let hi = &self.bounds[2 * ld * ni + ld..2 * ld * (ni + 1)];
        let mut d2 = 0.0;
        for k in 0..self.dim {
            let v = w[k];
            let t = if v < lo[k] {
                lo[k] - v
            } else if v > hi[k] {
                v - hi[k]
            } else {
                0.0
            };
            d2 += t * t;
        }
        // query sits at 0 in the lifted coordinate, which is always >= 0
        let t = lo[self.dim];
        d2 += t * t;
        0.5 * d2 - self.half_c
    }
}

fn slack(worst: f64, half_c: f64) -> f64 {
    if worst.is_infinite() {
        0.0
    } else {
        1e-9 * (1.0 + worst.abs() + half_c.abs())
    }
}

fn insert(best: &mut [(f64, usize)], cand: (f64, usize)) {
    let last = best.len() - 1;
    if !less(cand, best[last]) {
        return;
    }
    let mut pos = last;
    while pos > 0 && less(cand, best[pos - 1]) {
        best[pos] = best[pos - 1];
        pos -= 1;
    }
    best[pos] = cand;
}

#[inline]
fn less(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn build(
    lifted: &[f64],
    dim: usize,
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
    bounds: &mut Vec<f64>,
) -> usize {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for &i in &order[start..end] {
        for k in 0..dim {
            let v = lifted[i * dim + k];
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let id = nodes.len();
    nodes.push(Node {
        start: start as u32,
        end: end as u32,
        left: 0,
        right: 0,
    });
    bounds.extend_from_slice(&lo);
    bounds.extend_from_slice(&hi);
    if end - start <= LEAF_SIZE {
        return id;
    }
    let axis = (0..dim)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    if hi[axis] - lo[axis] <= 0.0 {
        return id;
    }
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        lifted[a * dim + axis].total_cmp(&lifted[b * dim + axis])
    });
    let left = build(lifted, dim, order, start, mid, nodes, bounds);
    let right = build(lifted, dim, order, mid, end, nodes, bounds);
    nodes[id].left = left as u32;
    nodes[id].right = right as u32;
    id
}
