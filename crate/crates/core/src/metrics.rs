//! Diagnostics: exact small-set W2, the support certificate of the latent
//! sampler, mode coverage and power-cell uniformity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::geometry::{sq_dist, PointCloud};
use crate::kdtree::PowerIndex;
use crate::sdot::{CellLocator, DualPotential, SdotProblem};

/// Significance level of the cell-uniformity test.
pub const UNIFORMITY_ALPHA: f64 = 0.01;

/// Membership balls, one per mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub centers: PointCloud,
    pub radius: f64,
}

impl ModeSpec {
    pub fn new(centers: PointCloud, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::invalid(format!("mode radius must be positive, got {radius}")));
        }
        if centers.is_empty() {
            return Err(Error::Empty("mode centers"));
        }
        for i in 0..centers.len() {
            for j in 0..i {
                if centers.point(i) == centers.point(j) {
                    return Err(Error::invalid(format!("mode centers {j} and {i} coincide")));
                }
            }
        }
        Ok(ModeSpec { centers, radius })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub counts: Vec<usize>,
    pub gap: usize,
    pub total: usize,
}

impl CoverageReport {
    pub fn shares(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.total as f64).collect()
    }

    pub fn gap_fraction(&self) -> f64 {
        self.gap as f64 / self.total as f64
    }
}

fn euclidean_index(points: &PointCloud) -> PowerIndex {
    PowerIndex::new(points.dim(), points.as_flat(), &vec![0.0; points.len()])
}

fn check_pair(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    Ok(())
}

/// Nearest point of `index` to each sample, with its squared distance.
fn nearest_all(samples: &PointCloud, refs: &PointCloud) -> Vec<(usize, f64)> {
    let index = euclidean_index(refs);
    (0..samples.len())
        .into_par_iter()
        .map(|k| {
            let p = samples.point(k);
            let j = index.nearest(p);
            (j, sq_dist(p, refs.point(j)))
        })
        .collect()
}

/// Each sample assigned to its nearest center when within the radius,
/// otherwise to the gap.
pub fn coverage(samples: &PointCloud, modes: &ModeSpec) -> Result<CoverageReport> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    check_pair(samples, &modes.centers)?;
    let mut counts = vec![0; modes.len()];
    let mut gap = 0;
    for (j, d2) in nearest_all(samples, &modes.centers) {
        if d2.sqrt() <= modes.radius {
            counts[j] += 1;
        } else {
            gap += 1;
        }
    }
    Ok(CoverageReport { counts, gap, total: samples.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodeGap {
    pub max: f64,
    pub mean: f64,
}

/// Distance from every sample to its nearest code; `max` is the support
/// certificate, to be compared with ε.
pub fn nearest_code_gap(samples: &PointCloud, codes: &PointCloud) -> Result<CodeGap> {
    if samples.is_empty() || codes.is_empty() {
        return Err(Error::Empty("samples or codes"));
    }
    check_pair(samples, codes)?;
    let d: Vec<f64> = nearest_all(samples, codes).into_iter().map(|(_, d2)| d2.sqrt()).collect();
    Ok(CodeGap {
        max: d.iter().fold(0.0, |m: f64, &v| m.max(v)),
        mean: d.iter().sum::<f64>() / d.len() as f64,
    })
}

/// Each sample replaced by its nearest code.
pub fn project_to_codes(samples: &PointCloud, codes: &PointCloud) -> Result<PointCloud> {
    if codes.is_empty() {
        return Err(Error::Empty("codes"));
    }
    check_pair(samples, codes)?;
    let idx: Vec<usize> = nearest_all(samples, codes).into_iter().map(|(j, _)| j).collect();
    Ok(codes.select(&idx))
}

/// Minimum-cost perfect matching on a square cost matrix (shortest
/// augmenting paths with potentials, O(n³)). Returns `assign[row] = col`.
fn hungarian(n: usize, cost: &[f64]) -> Vec<usize> {
    // 1-based arrays, column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// `sqrt(min over perfect matchings of the mean squared pair distance)`,
/// solved exactly. Cubic in the set size; meant for a few hundred points.
pub fn exact_w2(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch(a.len(), b.len()));
    }
    check_pair(a, b)?;
    let n = a.len();
    if n == 0 {
        return Ok(0.0);
    }
    let cost: Vec<f64> =
        (0..n).into_par_iter().flat_map_iter(|i| (0..n).map(move |j| sq_dist(a.point(i), b.point(j)))).collect();
    let assign = hungarian(n, &cost);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformityTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

impl UniformityTest {
    pub fn rejects(&self) -> bool {
        self.p_value < UNIFORMITY_ALPHA
    }
}

/// Pearson chi-square of power-cell hit counts of cube samples against the
/// target weights.
pub fn cell_uniformity(samples: &PointCloud, problem: &SdotProblem, h: &DualPotential) -> Result<UniformityTest> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    check_pair(samples, problem.targets())?;
    let n = problem.len();
    if n == 1 {
        return Ok(UniformityTest { statistic: 0.0, dof: 0, p_value: 1.0 });
    }
    let locator = CellLocator::new(problem, h)?;
    let mut hits = vec![0usize; n];
    for c in (0..samples.len()).into_par_iter().map(|k| locator.locate(samples.point(k))).collect::<Vec<_>>() {
        hits[c] += 1;
    }
    let m = samples.len() as f64;
    let statistic: f64 = hits
        .iter()
        .zip(problem.weights())
        .map(|(&o, &w)| {
            let e = m * w;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let dof = n - 1;
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(UniformityTest { statistic, dof, p_value: chi.sf(statistic) })
}
