//! Vietoris–Rips complex over latent codes.
//!
//! Only the 1-skeleton is stored. A vertex set is a simplex exactly when it
//! is a clique of the ε-graph, so higher simplices are checked on demand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{minimum_spanning_tree, sq_dist, PointCloud};

#[derive(Debug, Clone)]
pub struct RipsComplex {
    epsilon: f64,
    // sorted neighbor lists
    adjacency: Vec<Vec<usize>>,
    component: Vec<usize>,
    component_sizes: Vec<usize>,
    edge_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RipsSummary {
    pub epsilon: f64,
    pub n: usize,
    pub edge_count: usize,
    pub component_count: usize,
    pub component_sizes: Vec<usize>,
}

/// Edge rule `‖z_i − z_j‖₂ ≤ ε`.
#[inline]
fn within(a: &[f64], b: &[f64], epsilon: f64) -> bool {
    sq_dist(a, b).sqrt() <= epsilon
}

pub fn build_rips(codes: &PointCloud, epsilon: f64) -> Result<RipsComplex> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if codes.is_empty() {
        return Err(Error::Empty("rips codes"));
    }
    let n = codes.len();
    let mut adjacency = vec![Vec::new(); n];
    let mut edge_count = 0;
    for i in 0..n {
        let zi = codes.point(i);
        for j in i + 1..n {
            if within(zi, codes.point(j), epsilon) {
                adjacency[i].push(j);
                adjacency[j].push(i);
                edge_count += 1;
            }
        }
    }
    for a in &mut adjacency {
        a.sort_unstable();
    }

    let mut dsu = Dsu::new(n);
    for (i, a) in adjacency.iter().enumerate() {
        for &j in a {
            dsu.union(i, j);
        }
    }
    // component ids in order of first appearance
    let mut label = vec![usize::MAX; n];
    let mut component = vec![0; n];
    let mut component_sizes = Vec::new();
    for i in 0..n {
        let r = dsu.find(i);
        if label[r] == usize::MAX {
            label[r] = component_sizes.len();
            component_sizes.push(0);
        }
        component[i] = label[r];
        component_sizes[label[r]] += 1;
    }

    Ok(RipsComplex {
        epsilon,
        adjacency,
        component,
        component_sizes,
        edge_count,
    })
}

impl RipsComplex {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.adjacency[i].binary_search(&j).is_ok()
    }

    pub fn component_of(&self, i: usize) -> usize {
        self.component[i]
    }

    pub fn component_count(&self) -> usize {
        self.component_sizes.len()
    }

    pub fn component_sizes(&self) -> &[usize] {
        &self.component_sizes
    }

    /// Clique rule; singletons are always simplices.
    pub fn is_simplex(&self, indices: &[usize]) -> Result<bool> {
        if indices.is_empty() {
            return Err(Error::Empty("simplex vertex set"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.len(),
            });
        }
        Ok(self.is_clique(indices))
    }

    pub(crate) fn is_clique(&self, indices: &[usize]) -> bool {
        for (a, &i) in indices.iter().enumerate() {
            for &j in &indices[a + 1..] {
                if i != j && !self.has_edge(i, j) {
                    return false;
                }
            }
        }
        true
    }

    pub fn summary(&self) -> RipsSummary {
        RipsSummary {
            epsilon: self.epsilon,
            n: self.len(),
            edge_count: self.edge_count,
            component_count: self.component_count(),
            component_sizes: self.component_sizes.clone(),
        }
    }
}

/// Smallest ε whose Rips graph has at most `components` connected
/// components (exactly that many unless distance ties merge several at once).
///
/// The ε-graph's component count drops exactly at the sorted minimum
/// spanning tree edge lengths, so the answer is the `(n − k)`-th smallest of
/// them. When `k ≥ n` every point must stay isolated and half the closest
/// pair distance is returned.
pub fn select_epsilon(codes: &PointCloud, components: usize) -> Result<f64> {
    if components == 0 {
        return Err(Error::invalid("expected component count must be positive"));
    }
    let n = codes.len();
    if n < 2 {
        return Err(Error::invalid("need at least two codes to choose epsilon"));
    }
    let mut mst: Vec<f64> = minimum_spanning_tree(codes).into_iter().map(|e| e.2).collect();
    mst.sort_by(f64::total_cmp);
    let eps = if components >= n {
        0.5 * mst[0]
    } else {
        mst[n - components - 1]
    };
    if !(eps > 0.0) {
        return Err(Error::invalid(
            "codes contain duplicates; no positive epsilon separates them",
        ));
    }
    Ok(eps)
}

struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins, keeps labels stable
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}
