//! Points, point clouds and the squared-distance kernel.
//!
//! A [`PointCloud`] stores its coordinates in one flat row-major buffer so
//! that hot loops (cell assignment, Rips edges, cost matrices) stay on
//! contiguous memory.

use std::io::{BufRead, Write};
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single point in R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Empty("point coordinates"));
        }
        if let Some(v) = coords.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("point coordinate {v}")));
        }
        Ok(Point(coords))
    }

    pub fn zeros(dim: usize) -> Self {
        Point(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Point {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Point> for Vec<f64> {
    fn from(p: Point) -> Self {
        p.0
    }
}

/// `Σ_k (a_k − b_k)²`, checked for equal lengths.
pub fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(sq_dist(a, b))
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let t = x - y;
            t * t
        })
        .sum()
}

/// A set of points of a common dimension, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    dim: usize,
    data: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("point cloud dimension must be positive"));
        }
        Ok(PointCloud {
            dim,
            data: Vec::new(),
        })
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("point cloud dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "flat buffer of length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("point coordinate {v}")));
        }
        Ok(PointCloud { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut pc = PointCloud::new(dim)?;
        for r in rows {
            pc.push(r.as_ref())?;
        }
        Ok(pc)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn push(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: p.len(),
            });
        }
        if let Some(v) = p.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("point coordinate {v}")));
        }
        self.data.extend_from_slice(p);
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.point(i));
        }
        PointCloud {
            dim: self.dim,
            data,
        }
    }

    /// Coordinate-wise mean; `None` when empty.
    pub fn mean(&self) -> Option<Vec<f64>> {
        if self.is_empty() {
            return None;
        }
        let mut m = vec![0.0; self.dim];
        for p in self.iter() {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        Some(m)
    }

    /// Writes `x0,x1,...` header followed by one row per point.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for p in self.iter() {
            let row: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or(Error::Empty("point cloud csv"))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        for (k, c) in cols.iter().enumerate() {
            if c.trim() != format!("x{k}") {
                return Err(Error::invalid(format!(
                    "csv header column {k} is `{c}`, expected `x{k}`"
                )));
            }
        }
        let mut pc = PointCloud::new(cols.len())?;
        let mut row = Vec::with_capacity(cols.len());
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            row.clear();
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::invalid(format!("line {}: bad number `{field}`", lineno + 2))
                })?;
                row.push(v);
            }
            pc.push(&row)?;
        }
        Ok(pc)
    }
}

/// Edges `(parent, child, length)` of a Euclidean minimum spanning tree,
/// in the order Prim's algorithm (from point 0) adds them. O(n²) time,
/// O(n) memory.
pub fn minimum_spanning_tree(points: &PointCloud) -> Vec<(usize, usize, f64)> {
    let n = points.len();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![(f64::INFINITY, 0usize); n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut cur = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let zc = points.point(cur);
        let mut next = usize::MAX;
        let mut next_d = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = sq_dist(zc, points.point(j));
            if d < best[j].0 {
                best[j] = (d, cur);
            }
            if best[j].0 < next_d {
                next_d = best[j].0;
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((best[next].1, next, next_d.sqrt()));
        cur = next;
    }
    edges
}
