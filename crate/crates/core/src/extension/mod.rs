//! Piecewise-linear extension of the transport map over a Rips complex.
//!
//! A cube point `w` in cell `W_i` is written in barycentric coordinates of
//! the cell centroids nearest to it. When it lies inside their simplex and
//! the matching codes form a simplex of the Rips complex, it maps to the same
//! convex combination of codes; otherwise it maps to `z_i`.

mod rips;

pub use rips::{build_rips, select_epsilon, RipsComplex, RipsSummary};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::kdtree::PowerIndex;
use crate::rng::{map_chunks, RngStream};
use crate::sdot::{CellLocator, CellStats, DualPotential, SdotProblem};

// slack on the [0, 1] test for barycentric weights
const LAMBDA_TOL: f64 = 1e-12;

/// Outcome of a barycentric solve.
#[derive(Debug, Clone, PartialEq)]
pub enum Barycentric {
    /// All weights in `[0, 1]`.
    Inside(Vec<f64>),
    /// `w` is off the simplex: some weight is negative or above one, or `w`
    /// is off the affine hull of a lower-dimensional set.
    Outside,
    /// The points are affinely dependent.
    Degenerate,
}

/// Weights `λ` with `Σ λ_j = 1` and `Σ λ_j c_j = w` for at most `d + 1`
/// points `c_j`.
pub fn barycentric_coords(w: &[f64], centroids: &[&[f64]]) -> Result<Barycentric> {
    let d = w.len();
    let k = centroids.len();
    if k == 0 {
        return Err(Error::Empty("barycentric vertex set"));
    }
    if k > d + 1 {
        return Err(Error::invalid(format!(
            "{k} vertices in dimension {d}; at most {} allowed",
            d + 1
        )));
    }
    if let Some(c) = centroids.iter().find(|c| c.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: c.len(),
        });
    }
    let c0 = centroids[0];
    if k == 1 {
        let exact = w.iter().zip(c0).all(|(a, b)| a == b);
        return Ok(if exact {
            Barycentric::Inside(vec![1.0])
        } else {
            Barycentric::Outside
        });
    }
    // edges e_j = c_j − c_0; solve the normal equations E^T E μ = E^T (w − c_0)
    let m = k - 1;
    let edges: Vec<Vec<f64>> = centroids[1..]
        .iter()
        .map(|c| c.iter().zip(c0).map(|(a, b)| a - b).collect())
        .collect();
    let rel: Vec<f64> = w.iter().zip(c0).map(|(a, b)| a - b).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut gram = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    for a in 0..m {
        for b in 0..m {
            gram[a * m + b] = dot(&edges[a], &edges[b]);
        }
        rhs[a] = dot(&edges[a], &rel);
    }
    let Some(mu) = solve_dense(gram, rhs, m) else {
        return Ok(Barycentric::Degenerate);
    };
    // off the affine hull when the least-squares fit leaves a residual
    let scale = edges.iter().map(|e| dot(e, e)).fold(0.0, f64::max).sqrt();
    let residual = (0..d)
        .map(|t| rel[t] - (0..m).map(|a| mu[a] * edges[a][t]).sum::<f64>())
        .map(|r| r * r)
        .sum::<f64>()
        .sqrt();
    if residual > 1e-9 * scale.max(f64::MIN_POSITIVE) {
        return Ok(Barycentric::Outside);
    }
    let mut lambda = Vec::with_capacity(k);
    lambda.push(1.0 - mu.iter().sum::<f64>());
    lambda.extend(mu);
    if lambda
        .iter()
        .all(|l| (-LAMBDA_TOL..=1.0 + LAMBDA_TOL).contains(l))
    {
        Ok(Barycentric::Inside(lambda))
    } else {
        Ok(Barycentric::Outside)
    }
}

/// Gaussian elimination with partial pivoting; `None` when a pivot falls
/// below `1e-12` of the largest entry (numerically singular).
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, m: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..m {
        let piv = (col..m).max_by(|&r, &s| a[r * m + col].abs().total_cmp(&a[s * m + col].abs()))?;
        if a[piv * m + col].abs() <= 1e-12 * scale {
            return None;
        }
        if piv != col {
            for t in 0..m {
                a.swap(col * m + t, piv * m + t);
            }
            b.swap(col, piv);
        }
        for r in col + 1..m {
            let f = a[r * m + col] / a[col * m + col];
            for t in col..m {
                a[r * m + t] -= f * a[col * m + t];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; m];
    for r in (0..m).rev() {
        let s: f64 = (r + 1..m).map(|t| a[r * m + t] * x[t]).sum();
        x[r] = (b[r] - s) / a[r * m + r];
    }
    Some(x)
}

/// The extended map `T̃` built from a solved transport map and a Rips
/// complex over the same codes.
#[derive(Debug, Clone)]
pub struct ExtendedMap {
    problem: SdotProblem,
    potential: DualPotential,
    cell_stats: CellStats,
    rips: RipsComplex,
    neighbor_count: usize,
    locator: CellLocator,
    centroids: PointCloud,
    centroid_index: PowerIndex,
}

/// Where a cube point went: its cell and, when interpolated, the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Extension {
    pub point: Point,
    pub cell: usize,
    /// Code indices with their weights; `None` for the fallback to `z_cell`.
    pub simplex: Option<Vec<(usize, f64)>>,
}

impl ExtendedMap {
    /// `neighbor_count` defaults to `d + 1`.
    pub fn new(
        problem: SdotProblem,
        potential: DualPotential,
        cell_stats: CellStats,
        rips: RipsComplex,
        neighbor_count: Option<usize>,
    ) -> Result<Self> {
        let (n, d) = (problem.len(), problem.dim());
        for len in [potential.len(), cell_stats.barycenters.len(), rips.len()] {
            if len != n {
                return Err(Error::SizeMismatch(n, len));
            }
        }
        let neighbor_count = neighbor_count.unwrap_or(d + 1);
        if neighbor_count == 0 || neighbor_count > d + 1 {
            return Err(Error::invalid(format!(
                "neighbor_count must lie in 1..={}, got {neighbor_count}",
                d + 1
            )));
        }
        let mut centroids = PointCloud::new(d)?;
        for (i, c) in cell_stats.barycenters.iter().enumerate() {
            let c = c
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("cell {i} has no barycenter")))?;
            centroids.push(c)?;
        }
        let locator = CellLocator::new(&problem, &potential)?;
        let centroid_index = PowerIndex::new(d, centroids.as_flat(), &vec![0.0; n]);
        Ok(ExtendedMap {
            problem,
            potential,
            cell_stats,
            rips,
            neighbor_count,
            locator,
            centroids,
            centroid_index,
        })
    }

    pub fn problem(&self) -> &SdotProblem {
        &self.problem
    }

    pub fn potential(&self) -> &DualPotential {
        &self.potential
    }

    pub fn cell_stats(&self) -> &CellStats {
        &self.cell_stats
    }

    pub fn rips(&self) -> &RipsComplex {
        &self.rips
    }

    pub fn neighbor_count(&self) -> usize {
        self.neighbor_count
    }

    pub fn centroids(&self) -> &PointCloud {
        &self.centroids
    }

    /// `T̃(w)`.
    pub fn extend(&self, w: &[f64]) -> Result<Point> {
        Ok(self.extend_traced(w)?.point)
    }

    /// [`ExtendedMap::extend`] together with the cell and simplex used.
    pub fn extend_traced(&self, w: &[f64]) -> Result<Extension> {
        let d = self.problem.dim();
        if w.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: w.len(),
            });
        }
        let cell = self.locator.locate(w);
        let mut chosen: Vec<usize> = self
            .centroid_index
            .k_nearest(w, self.neighbor_count)
            .into_iter()
            .map(|(_, j)| j)
            .collect();
        if !chosen.contains(&cell) {
            // the own centroid replaces the farthest candidate
            *chosen.last_mut().expect("neighbor_count ≥ 1") = cell;
        }
        let codes = self.problem.targets();
        let fallback = || Extension {
            point: Point::new(codes.point(cell).to_vec()).expect("finite code"),
            cell,
            simplex: None,
        };
        if !self.rips.is_clique(&chosen) {
            return Ok(fallback());
        }
        let vertices: Vec<&[f64]> = chosen.iter().map(|&j| self.centroids.point(j)).collect();
        let Barycentric::Inside(lambda) = barycentric_coords(w, &vertices)? else {
            return Ok(fallback());
        };
        let mut out = vec![0.0; d];
        for (&j, &l) in chosen.iter().zip(&lambda) {
            for (o, z) in out.iter_mut().zip(codes.point(j)) {
                *o += l * z;
            }
        }
        Ok(Extension {
            point: Point::new(out)?,
            cell,
            simplex: Some(chosen.into_iter().zip(lambda).collect()),
        })
    }

    /// `count` i.i.d. draws of `T̃(w)`, `w ~ Uni([0,1]^d)`.
    pub fn sample_latent(&self, count: usize, rng: &RngStream) -> Result<PointCloud> {
        if count == 0 {
            return Err(Error::invalid("sample count must be positive"));
        }
        let d = self.problem.dim();
        let chunks = map_chunks(rng, count, |mut r, len| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(len * d);
            let mut w = vec![0.0; d];
            for _ in 0..len {
                w.iter_mut().for_each(|v| *v = r.uniform());
                out.extend_from_slice(&self.extend(&w)?);
            }
            Ok(out)
        });
        let flat: Vec<f64> = chunks.into_iter().collect::<Result<Vec<_>>>()?.concat();
        PointCloud::from_flat(d, flat)
    }
}

/// Source of latent codes for generation.
pub trait LatentSampler {
    fn latent_dim(&self) -> usize;
    fn sample_latent(&self, count: usize, rng: &RngStream) -> Result<PointCloud>;
}

impl LatentSampler for ExtendedMap {
    fn latent_dim(&self) -> usize {
        self.problem.dim()
    }

    fn sample_latent(&self, count: usize, rng: &RngStream) -> Result<PointCloud> {
        ExtendedMap::sample_latent(self, count, rng)
    }
}

/// Ablation baseline: spherical Gaussian noise with the mean of the codes
/// and their average per-coordinate variance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianLatent {
    pub fn fit(codes: &PointCloud) -> Result<Self> {
        let mean = codes.mean().ok_or(Error::Empty("latent codes"))?;
        let var = codes.iter().map(|z| crate::geometry::sq_dist(z, &mean)).sum::<f64>()
            / (codes.len() * codes.dim()) as f64;
        Ok(GaussianLatent { mean, std: var.sqrt() })
    }
}

impl LatentSampler for GaussianLatent {
    fn latent_dim(&self) -> usize {
        self.mean.len()
    }

    fn sample_latent(&self, count: usize, rng: &RngStream) -> Result<PointCloud> {
        if count == 0 {
            return Err(Error::invalid("sample count must be positive"));
        }
        let d = self.mean.len();
        let chunks = map_chunks(rng, count, |mut r, len| {
            (0..len * d).map(|k| self.mean[k % d] + self.std * r.normal()).collect::<Vec<f64>>()
        });
        PointCloud::from_flat(d, chunks.concat())
    }
}
