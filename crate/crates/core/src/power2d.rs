//! Exact power cells in the unit square.
//!
//! Cell `i` is the square clipped by the half-planes
//! `½|w − z_i|² − h_i ≤ ½|w − z_j|² − h_j`. Only the constraints violated at
//! some vertex of the current polygon are ever applied; once no vertex is
//! beaten by any other site, convexity makes the polygon exact.

use rayon::prelude::*;

use crate::geometry::PointCloud;
use crate::kdtree::PowerIndex;

/// Edge label for the square's own boundary.
const BOUNDARY: usize = usize::MAX;

/// Geometry of one power cell.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Cell {
    pub area: f64,
    /// `∫_cell w dw`
    pub moment: [f64; 2],
    /// `∫_cell |w|² dw`
    pub inertia: f64,
    /// `(neighbor, facet length)` for every facet shared with another cell.
    pub facets: Vec<(usize, f64)>,
}

/// Polygon vertices; edge `k` runs from vertex `k` to `k + 1` and carries the
/// label of the constraint that created it.
type Polygon = Vec<([f64; 2], usize)>;

fn unit_square() -> Polygon {
    vec![
        ([0.0, 0.0], BOUNDARY),
        ([1.0, 0.0], BOUNDARY),
        ([1.0, 1.0], BOUNDARY),
        ([0.0, 1.0], BOUNDARY),
    ]
}

/// Keeps the part of `poly` with `a·w ≤ b`; new edges get `label`.
fn clip(poly: &Polygon, a: [f64; 2], b: f64, label: usize) -> Polygon {
    let f = |p: &[f64; 2]| a[0] * p[0] + a[1] * p[1] - b;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for k in 0..poly.len() {
        let (p, edge) = poly[k];
        let q = poly[(k + 1) % poly.len()].0;
        let (fp, fq) = (f(&p), f(&q));
        let cross = |fp: f64, fq: f64| {
            let t = fp / (fp - fq);
            [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
        };
        if fp <= 0.0 {
            out.push((p, edge));
            if fq > 0.0 {
                out.push((cross(fp, fq), label));
            }
        } else if fq <= 0.0 {
            out.push((cross(fp, fq), edge));
        }
    }
    out
}

fn score(w: &[f64; 2], z: &[f64], h: f64) -> f64 {
    0.5 * ((w[0] - z[0]).powi(2) + (w[1] - z[1]).powi(2)) - h
}

// Lifted neighbors every cell starts from.
const SEED_NEIGHBORS: usize = 16;
// Rounds of candidate growth and local repair before every cell is checked
// vertex by vertex.
const REFINE_ROUNDS: usize = 10;

fn half_plane(i: usize, j: usize, targets: &PointCloud, h: &[f64]) -> ([f64; 2], f64) {
    let (zi, zj) = (targets.point(i), targets.point(j));
    let a = [zj[0] - zi[0], zj[1] - zi[1]];
    let b = 0.5 * (zj[0] * zj[0] + zj[1] * zj[1] - zi[0] * zi[0] - zi[1] * zi[1]) + h[i] - h[j];
    (a, b)
}

/// Applies the constraint of `j` to cell `i`; `false` once the cell is empty.
fn apply(poly: &mut Polygon, i: usize, j: usize, targets: &PointCloud, h: &[f64]) -> bool {
    let (a, b) = half_plane(i, j, targets, h);
    if a == [0.0, 0.0] {
        // coincident targets: the larger potential (then the lower index)
        // owns the shared cell
        if b < 0.0 || (b == 0.0 && j < i) {
            poly.clear();
        }
    } else {
        *poly = clip(poly, a, b, j);
    }
    if poly.len() < 3 {
        poly.clear();
    }
    !poly.is_empty()
}

/// Square clipped by the constraints of `candidates`: a superset of cell `i`.
fn clipped(i: usize, candidates: &[usize], targets: &PointCloud, h: &[f64]) -> Polygon {
    let mut poly = unit_square();
    for &j in candidates {
        if !apply(&mut poly, i, j, targets, h) {
            break;
        }
    }
    poly
}

/// Adds every constraint violated at a vertex until none is; convexity then
/// makes the polygon exact.
fn repaired(
    i: usize,
    mut poly: Polygon,
    candidates: &[usize],
    targets: &PointCloud,
    h: &[f64],
    index: &PowerIndex,
) -> Polygon {
    let zi = targets.point(i);
    let mut applied = candidates.to_vec();
    while !poly.is_empty() {
        let mut violated: Vec<usize> = Vec::new();
        for (v, _) in &poly {
            let own = score(v, zi, h[i]);
            let bound = own - 1e-12 * (1.0 + own.abs());
            if let Some((_, j)) = index.nearest_below(v, bound) {
                if !violated.contains(&j) && !applied.contains(&j) {
                    violated.push(j);
                }
            }
        }
        if violated.is_empty() {
            break;
        }
        for j in violated {
            applied.push(j);
            if !apply(&mut poly, i, j, targets, h) {
                break;
            }
        }
    }
    poly
}

/// Candidate sets grown along the current diagram: a site that cuts cell
/// `i` is cut by `i` in turn, and neighbors of neighbors are tried.
fn grown(polys: &[Polygon], mut candidates: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    let labels: Vec<Vec<usize>> = polys
        .iter()
        .map(|p| p.iter().map(|e| e.1).filter(|&j| j != BOUNDARY).collect())
        .collect();
    for (i, li) in labels.iter().enumerate() {
        for &j in li {
            candidates[j].push(i);
            candidates[i].extend(labels[j].iter().copied().filter(|&k| k != i));
        }
    }
    candidates.par_iter_mut().for_each(|c| {
        c.sort_unstable();
        c.dedup();
    });
    candidates
}

/// Cells touching the square's boundary or with a facet whose length the
/// neighbor does not confirm.
fn suspects(polys: &[Polygon]) -> Vec<bool> {
    let lengths: Vec<Vec<(usize, f64)>> = polys
        .iter()
        .map(|p| {
            (0..p.len())
                .map(|k| {
                    let (a, b) = (p[k].0, p[(k + 1) % p.len()].0);
                    (p[k].1, ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                })
                .collect()
        })
        .collect();
    let mut flag = vec![false; polys.len()];
    for (i, edges) in lengths.iter().enumerate() {
        for &(j, len) in edges {
            if j == BOUNDARY {
                flag[i] = true;
                continue;
            }
            let back: f64 = lengths[j].iter().filter(|e| e.0 == i).map(|e| e.1).sum();
            if (back - len).abs() > 1e-9 * (1.0 + len) {
                flag[i] = true;
                flag[j] = true;
            }
        }
    }
    flag
}

fn area(poly: &Polygon) -> f64 {
    let mut twice = 0.0;
    for k in 0..poly.len() {
        let (p, q) = (poly[k].0, poly[(k + 1) % poly.len()].0);
        twice += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * twice
}

fn integrate(poly: &Polygon) -> Cell {
    let mut area = 0.0;
    let mut moment = [0.0; 2];
    let mut inertia = 0.0;
    let mut facets = Vec::new();
    for k in 0..poly.len() {
        let (p, label) = poly[k];
        let q = poly[(k + 1) % poly.len()].0;
        let cross = p[0] * q[1] - q[0] * p[1];
        area += cross;
        moment[0] += (p[0] + q[0]) * cross;
        moment[1] += (p[1] + q[1]) * cross;
        inertia += cross
            * (p[0] * p[0] + p[0] * q[0] + q[0] * q[0] + p[1] * p[1] + p[1] * q[1] + q[1] * q[1]);
        if label != BOUNDARY {
            let len = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
            if len > 0.0 {
                facets.push((label, len));
            }
        }
    }
    Cell {
        area: (0.5 * area).max(0.0),
        moment: [moment[0] / 6.0, moment[1] / 6.0],
        inertia: inertia / 12.0,
        facets,
    }
}

/// All cells of the power diagram of `targets` with potentials `h`.
///
/// Each cell is clipped by a candidate set of sites, which yields a superset
/// of the true cell. The true cells tile the square, so areas summing to one
/// certify the diagram. Until they do, candidate sets grow along the current
/// diagram, and once that stalls suspicious cells are checked vertex by
/// vertex.
pub(crate) fn power_cells(targets: &PointCloud, h: &[f64]) -> Vec<Cell> {
    debug_assert_eq!(targets.dim(), 2);
    let n = targets.len();
    // lifted sites (z, √(2(H − h))): their Voronoi diagram cut by the plane
    // is the power diagram, so lifted neighbors are likely cell neighbors
    let top = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sites: Vec<f64> = targets
        .iter()
        .zip(h)
        .flat_map(|(z, &hj)| [z[0], z[1], (2.0 * (top - hj)).max(0.0).sqrt()])
        .collect();
    let lifted = PowerIndex::new(3, &sites, &vec![0.0; n]);
    let mut candidates: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            lifted
                .k_nearest(&sites[3 * i..3 * i + 3], SEED_NEIGHBORS + 1)
                .into_iter()
                .map(|(_, j)| j)
                .filter(|&j| j != i)
                .collect()
        })
        .collect();
    let mut polys: Vec<Polygon> = (0..n)
        .into_par_iter()
        .map(|i| clipped(i, &candidates[i], targets, h))
        .collect();
    let index = PowerIndex::new(2, targets.as_flat(), h);
    let mut last = f64::INFINITY;
    for _ in 0..REFINE_ROUNDS {
        let total: f64 = polys.iter().map(area).sum();
        if total <= 1.0 + 1e-10 {
            return polys.iter().map(integrate).collect();
        }
        if last - total > 0.01 * (last - 1.0).min(1.0) {
            candidates = grown(&polys, candidates);
            polys = polys
                .into_par_iter()
                .enumerate()
                .map(|(i, p)| {
                    if p.is_empty() {
                        p
                    } else {
                        clipped(i, &candidates[i], targets, h)
                    }
                })
                .collect();
        } else {
            // overlaps that growth cannot see sit among cells reaching the
            // square's edge or whose facets disagree with their neighbors'
            let suspect = suspects(&polys);
            polys = polys
                .into_par_iter()
                .enumerate()
                .map(|(i, p)| {
                    if suspect[i] {
                        repaired(i, p, &candidates[i], targets, h, &index)
                    } else {
                        p
                    }
                })
                .collect();
            for (i, p) in polys.iter().enumerate() {
                candidates[i].extend(p.iter().map(|e| e.1).filter(|&j| j != BOUNDARY));
            }
        }
        last = total;
    }
    polys
        .into_par_iter()
        .enumerate()
        .map(|(i, p)| integrate(&repaired(i, p, &candidates[i], targets, h, &index)))
        .collect()
}

/// Exact dual objective `Σ ν_i h_i + Σ_i ∫_{W_i} (½|w − z_i|² − h_i) dw`.
pub(crate) fn dual_value(targets: &PointCloud, weights: &[f64], h: &[f64], cells: &[Cell]) -> f64 {
    cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let z = targets.point(i);
            let zz = z[0] * z[0] + z[1] * z[1];
            weights[i] * h[i] + 0.5 * c.inertia - (z[0] * c.moment[0] + z[1] * c.moment[1])
                + (0.5 * zz - h[i]) * c.area
        })
        .sum()
}
