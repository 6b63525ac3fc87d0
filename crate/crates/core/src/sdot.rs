//! Semi-discrete optimal transport from Uni([0,1]^d) to a weighted point set.
//!
//! The map sends every `w` in the power cell
//! `W_i = { w : ½|w − z_i|² − h_i ≤ ½|w − z_j|² − h_j  ∀j }` to `z_i`. The
//! potential `h` maximizes the concave dual
//! `F(h) = Σ ν_i h_i + ∫ min_i (½|w − z_i|² − h_i) dw`, whose gradient is
//! `ν_i − μ(W_i)`. The default solver is a damped Newton ascent: in the plane
//! it works on exact cells, elsewhere on Monte Carlo estimates of the cell
//! masses and facet areas. Either way a large independent sample pass
//! confirms convergence and supplies the reported cell statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sq_dist, Point, PointCloud};
use crate::power2d::{dual_value, power_cells, Cell};
use crate::kdtree::PowerIndex;
use crate::rng::{map_chunks, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct SdotProblem {
    targets: PointCloud,
    weights: Vec<f64>,
}

impl SdotProblem {
    /// Equal weights `1/n`.
    pub fn uniform(targets: PointCloud) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Empty("transport targets"));
        }
        let n = targets.len();
        Ok(SdotProblem {
            targets,
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn with_weights(targets: PointCloud, weights: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Empty("transport targets"));
        }
        if weights.len() != targets.len() {
            return Err(Error::SizeMismatch(targets.len(), weights.len()));
        }
        if weights.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("target weights must be positive and finite"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("target weights sum to {total}, not 1")));
        }
        Ok(SdotProblem { targets, weights })
    }

    pub fn targets(&self) -> &PointCloud {
        &self.targets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.targets.dim()
    }

    fn check_potential(&self, h: &DualPotential) -> Result<()> {
        if h.len() != self.len() {
            return Err(Error::SizeMismatch(self.len(), h.len()));
        }
        Ok(())
    }
}

/// Per-target dual potential, defined up to an additive constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DualPotential(Vec<f64>);

impl DualPotential {
    pub fn zeros(n: usize) -> Self {
        DualPotential(vec![0.0; n])
    }

    /// Wraps raw values without gauge fixing.
    pub fn from_values(h: Vec<f64>) -> Self {
        DualPotential(h)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Subtracts the mean so that `Σ h_i = 0`.
    pub fn gauge_fix(&mut self) {
        if self.0.is_empty() {
            return;
        }
        let m = self.0.iter().sum::<f64>() / self.0.len() as f64;
        self.0.iter_mut().for_each(|v| *v -= m);
    }

    pub fn shifted(&self, c: f64) -> Self {
        DualPotential(self.0.iter().map(|v| v + c).collect())
    }
}

/// Monte Carlo cell measures and mass centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub measures: Vec<f64>,
    /// `None` for cells that received no sample.
    pub barycenters: Vec<Option<Point>>,
    pub hits: Vec<u64>,
    pub sample_count: usize,
}

impl CellStats {
    pub fn max_deviation(&self, weights: &[f64]) -> f64 {
        self.measures
            .iter()
            .zip(weights)
            .map(|(m, w)| (m - w).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_cells_hit(&self) -> bool {
        self.barycenters.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    /// Damped Newton steps on a Monte Carlo estimate of the facet Laplacian.
    Newton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Fresh uniform samples per ascent iteration.
    pub mc_samples: usize,
    /// Samples for the verification pass that confirms convergence and
    /// produces the reported barycenters.
    pub verify_samples: usize,
    /// Initial step size, relative to the natural potential scale of the
    /// targets (`spread · n^{-1/d}`).
    pub step_size: f64,
    pub max_iterations: usize,
    /// Bound on `max_i |μ(W_i) − ν_i|`.
    pub tolerance: f64,
    pub optimizer: OptimizerKind,
    /// Iterations without improvement of the best deviation before the
    /// step size is halved.
    pub patience: usize,
}

impl SolverConfig {
    /// Defaults for `n` targets: tolerance `0.2/n`.
    pub fn for_targets(n: usize) -> Self {
        let n = n.max(1);
        SolverConfig {
            mc_samples: (200 * n).clamp(20_000, 1_000_000),
            verify_samples: (1000 * n).clamp(100_000, 4_000_000),
            step_size: 0.03,
            max_iterations: 500,
            tolerance: 0.2 / n as f64,
            optimizer: OptimizerKind::Newton,
            patience: 25,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("solver tolerance must be positive"));
        }
        if self.mc_samples < 10 * n {
            return Err(Error::invalid(format!(
                "mc_samples {} below 10·n = {}",
                self.mc_samples,
                10 * n
            )));
        }
        if self.verify_samples < n {
            return Err(Error::invalid("verify_samples must be at least n"));
        }
        if !(self.step_size > 0.0) || self.max_iterations == 0 || self.patience == 0 {
            return Err(Error::invalid(
                "step size, iteration budget and patience must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub potential: DualPotential,
    pub stats: CellStats,
    pub iterations: usize,
    pub converged: bool,
    /// Deviation measured by the final verification pass.
    pub max_deviation: f64,
    /// Per-iteration max deviation of the iteration's own estimate.
    pub trace: Vec<f64>,
}

/// `argmin_i (½|w − z_i|² − h_i)` by direct scan, lowest index on ties.
pub fn assign_cell(w: &[f64], problem: &SdotProblem, h: &DualPotential) -> Result<usize> {
    if w.len() != problem.dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            got: w.len(),
        });
    }
    problem.check_potential(h)?;
    Ok(scan(w, problem, h))
}

fn scan(w: &[f64], problem: &SdotProblem, h: &DualPotential) -> usize {
    let mut best = f64::INFINITY;
    let mut arg = 0;
    for (i, z) in problem.targets.iter().enumerate() {
        let s = 0.5 * sq_dist(w, z) - h.0[i];
        if s < best {
            best = s;
            arg = i;
        }
    }
    arg
}

/// Cell lookup accelerated by a power-score k-d tree; same answers as
/// [`assign_cell`].
#[derive(Debug, Clone)]
pub struct CellLocator {
    index: PowerIndex,
}

impl CellLocator {
    pub fn new(problem: &SdotProblem, h: &DualPotential) -> Result<Self> {
        problem.check_potential(h)?;
        Ok(CellLocator {
            index: PowerIndex::new(problem.dim(), problem.targets.as_flat(), &h.0),
        })
    }

    pub fn locate(&self, w: &[f64]) -> usize {
        self.index.nearest(w)
    }
}

fn check_samples(problem: &SdotProblem, samples: &PointCloud) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty("dual objective sample set"));
    }
    if samples.dim() != problem.dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.dim(),
            got: samples.dim(),
        });
    }
    Ok(())
}

/// Monte Carlo dual objective `Σ ν_i h_i + mean_w min_i(½|w − z_i|² − h_i)`.
pub fn dual_objective(
    problem: &SdotProblem,
    h: &DualPotential,
    samples: &PointCloud,
) -> Result<f64> {
    problem.check_potential(h)?;
    check_samples(problem, samples)?;
    let linear: f64 = problem.weights.iter().zip(&h.0).map(|(a, b)| a * b).sum();
    let mut acc = 0.0;
    for w in samples.iter() {
        let i = scan(w, problem, h);
        acc += 0.5 * sq_dist(w, problem.targets.point(i)) - h.0[i];
    }
    Ok(linear + acc / samples.len() as f64)
}

/// `g_i = ν_i − (fraction of samples in W_i)`; sums to zero up to rounding.
pub fn dual_gradient(
    problem: &SdotProblem,
    h: &DualPotential,
    samples: &PointCloud,
) -> Result<Vec<f64>> {
    problem.check_potential(h)?;
    check_samples(problem, samples)?;
    let mut hits = vec![0u64; problem.len()];
    for w in samples.iter() {
        hits[scan(w, problem, h)] += 1;
    }
    let m = samples.len() as f64;
    Ok(problem
        .weights
        .iter()
        .zip(&hits)
        .map(|(nu, &c)| nu - c as f64 / m)
        .collect())
}

struct Tally {
    hits: Vec<u64>,
    sums: Vec<f64>,
}

fn tally(
    locator: &CellLocator,
    n: usize,
    d: usize,
    count: usize,
    rng: &RngStream,
    with_sums: bool,
) -> Tally {
    let parts = map_chunks(rng, count, |mut r, len| {
        let mut hits = vec![0u64; n];
        let mut sums = if with_sums { vec![0.0; n * d] } else { Vec::new() };
        let mut w = vec![0.0; d];
        for _ in 0..len {
            w.iter_mut().for_each(|v| *v = r.uniform());
            let i = locator.locate(&w);
            hits[i] += 1;
            if with_sums {
                for (s, v) in sums[i * d..(i + 1) * d].iter_mut().zip(&w) {
                    *s += v;
                }
            }
        }
        Tally { hits, sums }
    });
    let mut total = Tally {
        hits: vec![0; n],
        sums: if with_sums { vec![0.0; n * d] } else { Vec::new() },
    };
    for p in parts {
        total.hits.iter_mut().zip(&p.hits).for_each(|(a, b)| *a += b);
        total.sums.iter_mut().zip(&p.sums).for_each(|(a, b)| *a += b);
    }
    total
}

/// Cell measures and barycenters from `sample_count` uniform draws.
pub fn estimate_cell_stats(
    problem: &SdotProblem,
    h: &DualPotential,
    sample_count: usize,
    rng: &RngStream,
) -> Result<CellStats> {
    if sample_count == 0 {
        return Err(Error::invalid("sample_count must be positive"));
    }
    let locator = CellLocator::new(problem, h)?;
    Ok(stats_with(&locator, problem, sample_count, rng))
}

fn stats_with(
    locator: &CellLocator,
    problem: &SdotProblem,
    sample_count: usize,
    rng: &RngStream,
) -> CellStats {
    let (n, d) = (problem.len(), problem.dim());
    let t = tally(locator, n, d, sample_count, rng, true);
    let total = sample_count as f64;
    let measures = t.hits.iter().map(|&c| c as f64 / total).collect();
    let barycenters = (0..n)
        .map(|i| {
            let c = t.hits[i];
            (c > 0).then(|| {
                let coords = t.sums[i * d..(i + 1) * d]
                    .iter()
                    .map(|s| s / c as f64)
                    .collect();
                Point::new(coords).expect("averages of unit-cube samples are finite")
            })
        })
        .collect();
    CellStats {
        measures,
        barycenters,
        hits: t.hits,
        sample_count,
    }
}

/// Potential whose power cells are the Voronoi cells of the targets after an
/// affine rescale into `[0.05, 0.95]^d`. Every cell then contains its rescaled
/// site, so no cell starts empty.
pub fn voronoi_initial_potential(problem: &SdotProblem) -> DualPotential {
    let targets = &problem.targets;
    let d = targets.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for z in targets.iter() {
        for k in 0..d {
            lo[k] = lo[k].min(z[k]);
            hi[k] = hi[k].max(z[k]);
        }
    }
    let range = (0..d).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let scale = if range > 0.0 { 0.9 / range } else { 1.0 };
    let offset: Vec<f64> = (0..d)
        .map(|k| 0.5 - scale * 0.5 * (lo[k] + hi[k]))
        .collect();
    let mut h = DualPotential(
        targets
            .iter()
            .map(|z| {
                let zz: f64 = z.iter().map(|v| v * v).sum();
                let yy: f64 = z
                    .iter()
                    .zip(&offset)
                    .map(|(v, a)| (a + scale * v).powi(2))
                    .sum();
                0.5 * zz - yy / (2.0 * scale)
            })
            .collect(),
    );
    h.gauge_fix();
    h
}

/// Natural scale of potential differences: target spread times cell width.
fn potential_scale(problem: &SdotProblem) -> f64 {
    let targets = &problem.targets;
    let n = targets.len();
    let mean = targets.mean().expect("non-empty targets");
    let spread = (targets.iter().map(|z| sq_dist(z, &mean)).sum::<f64>() / n as f64).sqrt();
    let width = (n as f64).powf(-1.0 / problem.dim() as f64);
    let s = spread * width;
    if s > 0.0 {
        s
    } else {
        width
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-12;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn direction(&mut self, g: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * gi;
                self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * gi * gi;
                (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

/// Stochastic ascent on the dual until the verified cell masses match the
/// target weights within `config.tolerance`.
///
/// Non-convergence is reported through `SolveReport::converged`; the
/// returned potential is then the best iterate seen.
pub fn solve(problem: &SdotProblem, config: &SolverConfig, rng: &RngStream) -> Result<SolveReport> {
    solve_observed(problem, config, rng, |_, _| {})
}

/// [`solve`], calling `observe(iteration, h)` on every accepted iterate.
pub fn solve_observed<F>(
    problem: &SdotProblem,
    config: &SolverConfig,
    rng: &RngStream,
    observe: F,
) -> Result<SolveReport>
where
    F: FnMut(usize, &DualPotential),
{
    let n = problem.len();
    config.validate(n)?;
    if n == 1 {
        let h = DualPotential::zeros(1);
        let locator = CellLocator::new(problem, &h)?;
        let stats = stats_with(&locator, problem, config.verify_samples, &rng.split_named("verify"));
        return Ok(SolveReport {
            potential: h,
            max_deviation: stats.max_deviation(&problem.weights),
            stats,
            iterations: 0,
            converged: true,
            trace: Vec::new(),
        });
    }
    match config.optimizer {
        OptimizerKind::Adam => adam_ascent(problem, config, rng, observe),
        OptimizerKind::Newton => newton_ascent(problem, config, rng, observe),
    }
}

/// Shared bookkeeping: verification passes and the best iterate so far.
struct Verifier<'a> {
    problem: &'a SdotProblem,
    config: &'a SolverConfig,
    rng: RngStream,
    rounds: u64,
    best: (f64, DualPotential),
}

impl<'a> Verifier<'a> {
    fn new(problem: &'a SdotProblem, config: &'a SolverConfig, rng: &RngStream) -> Self {
        Verifier {
            problem,
            config,
            rng: rng.split_named("verify"),
            rounds: 0,
            best: (f64::INFINITY, DualPotential::zeros(problem.len())),
        }
    }

    fn note(&mut self, dev: f64, h: &DualPotential) {
        if dev < self.best.0 {
            self.best = (dev, h.clone());
        }
    }

    fn verify(&mut self, locator: &CellLocator) -> CellStats {
        let stats = stats_with(
            locator,
            self.problem,
            self.config.verify_samples,
            &self.rng.split(self.rounds),
        );
        self.rounds += 1;
        stats
    }

    fn finish(
        mut self,
        h: Option<(DualPotential, CellStats)>,
        iterations: usize,
        trace: Vec<f64>,
    ) -> Result<SolveReport> {
        let weights = &self.problem.weights;
        let (potential, stats) = match h {
            Some(found) => found,
            None => {
                let h = self.best.1.clone();
                let locator = CellLocator::new(self.problem, &h)?;
                let stats = self.verify(&locator);
                (h, stats)
            }
        };
        let max_deviation = stats.max_deviation(weights);
        Ok(SolveReport {
            potential,
            converged: max_deviation <= self.config.tolerance,
            max_deviation,
            stats,
            iterations,
            trace,
        })
    }
}

fn adam_ascent<F>(
    problem: &SdotProblem,
    config: &SolverConfig,
    rng: &RngStream,
    mut observe: F,
) -> Result<SolveReport>
where
    F: FnMut(usize, &DualPotential),
{
    let (n, d) = (problem.len(), problem.dim());
    let mut verifier = Verifier::new(problem, config, rng);
    let mut lr = config.step_size * potential_scale(problem);
    let min_lr = lr * 1e-4;
    let mut h = voronoi_initial_potential(problem);
    let mut adam = Adam::new(n);
    let mut best_dev = f64::INFINITY;
    let mut since_best = 0usize;
    let mut trace = Vec::new();

    for iter in 0..config.max_iterations {
        observe(iter, &h);
        let locator = CellLocator::new(problem, &h)?;
        let t = tally(&locator, n, d, config.mc_samples, &rng.split(iter as u64), false);
        let total = config.mc_samples as f64;
        let grad: Vec<f64> = problem
            .weights
            .iter()
            .zip(&t.hits)
            .map(|(nu, &c)| nu - c as f64 / total)
            .collect();
        let dev = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        trace.push(dev);
        verifier.note(dev, &h);

        if dev < best_dev {
            best_dev = dev;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience && lr > min_lr {
                lr *= 0.5;
                since_best = 0;
            }
        }

        if dev <= config.tolerance {
            let stats = verifier.verify(&locator);
            if stats.max_deviation(&problem.weights) <= config.tolerance {
                return verifier.finish(Some((h, stats)), iter + 1, trace);
            }
        }

        let step = adam.direction(&grad);
        for (hi, s) in h.0.iter_mut().zip(&step) {
            *hi += lr * s;
        }
        h.gauge_fix();
    }
    verifier.finish(None, config.max_iterations, trace)
}

/// Hit counts plus, per sample lying close to a facet, the facet's pair.
struct NewtonPass {
    hits: Vec<u64>,
    // (lo, hi, ring) per near-facet sample; ring k means within band/2^k
    pairs: Vec<(u32, u32, u8)>,
    samples: usize,
    // per-cell band half-width in w units used for this pass
    bands: Vec<f64>,
    // mean over the samples of min_i(½|w − z_i|² − h_i)
    envelope: f64,
}

impl NewtonPass {
    fn gradient(&self, weights: &[f64]) -> Vec<f64> {
        let m = self.samples as f64;
        weights
            .iter()
            .zip(&self.hits)
            .map(|(nu, &c)| nu - c as f64 / m)
            .collect()
    }

    /// Sample estimate of the dual objective at `h`.
    fn objective(&self, weights: &[f64], h: &DualPotential) -> f64 {
        weights.iter().zip(&h.0).map(|(v, x)| v * x).sum::<f64>() + self.envelope
    }

    /// Band widths for the next pass: a fixed fraction of each cell's
    /// linear size `μ_i^{1/d}`.
    fn next_bands(&self, d: usize) -> Vec<f64> {
        band_widths(&self.hits, self.samples, d)
    }
}

// Facet band half-width as a fraction of the cell's linear size.
const BAND_FRACTION: f64 = 0.2;

fn band_widths(hits: &[u64], samples: usize, d: usize) -> Vec<f64> {
    let m = samples as f64;
    hits.iter()
        .map(|&c| BAND_FRACTION * ((c as f64).max(0.5) / m).powf(1.0 / d as f64))
        .collect()
}

fn newton_pass(
    problem: &SdotProblem,
    index: &PowerIndex,
    bands: &[f64],
    count: usize,
    rng: &RngStream,
) -> NewtonPass {
    let (n, d) = (problem.len(), problem.dim());
    let targets = &problem.targets;
    let parts = map_chunks(rng, count, |mut r, len| {
        let mut hits = vec![0u64; n];
        let mut pairs = Vec::new();
        let mut envelope = 0.0;
        let mut w = vec![0.0; d];
        for _ in 0..len {
            w.iter_mut().for_each(|v| *v = r.uniform());
            let [a, b] = index.nearest_two(&w);
            hits[a.1] += 1;
            envelope += a.0;
            if b.1 == usize::MAX {
                continue;
            }
            let band = bands[a.1].min(bands[b.1]);
            let sep = sq_dist(targets.point(a.1), targets.point(b.1)).sqrt();
            // distance from w to the bisecting facet of the two cells
            let gap = b.0 - a.0;
            if sep > 0.0 && gap < band * sep {
                let ring = if gap < 0.25 * band * sep {
                    2
                } else if gap < 0.5 * band * sep {
                    1
                } else {
                    0
                };
                pairs.push((a.1.min(b.1) as u32, a.1.max(b.1) as u32, ring));
            }
        }
        (hits, pairs, envelope)
    });
    let mut hits = vec![0u64; n];
    let mut pairs = Vec::new();
    let mut envelope = 0.0;
    for (h, p, e) in parts {
        hits.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
        pairs.extend(p);
        envelope += e;
    }
    NewtonPass {
        hits,
        pairs,
        samples: count,
        bands: bands.to_vec(),
        envelope: envelope / count as f64,
    }
}

/// Monte Carlo estimate of the facet Laplacian `L` (`∂μ_i/∂h_j = −L_ij`
/// for `i ≠ j`, rows summing to zero).
struct Laplacian {
    edges: Vec<(usize, usize, f64)>,
    diag: Vec<f64>,
}

impl Laplacian {
    fn estimate(pass: &NewtonPass, targets: &PointCloud) -> Self {
        let n = pass.hits.len();
        let mut pairs = pass.pairs.clone();
        pairs.sort_unstable();
        // samples within `band` of facet ij on either side estimate
        // 2·band·area_ij; the mass exchange rate is area_ij / |z_i − z_j|.
        // Cells thinner than the band saturate the count, so the narrower
        // rings are used too and the largest well-supported estimate wins.
        let mut edges: Vec<(usize, usize, f64)> = Vec::new();
        let m = pass.samples as f64;
        let mut k = 0;
        while k < pairs.len() {
            let (i, j) = (pairs[k].0 as usize, pairs[k].1 as usize);
            let mut rings = [0.0f64; 3];
            while k < pairs.len() && pairs[k].0 as usize == i && pairs[k].1 as usize == j {
                rings[pairs[k].2 as usize] += 1.0;
                k += 1;
            }
            let band = pass.bands[i].min(pass.bands[j]);
            let sep = sq_dist(targets.point(i), targets.point(j)).sqrt();
            let within = [rings[0] + rings[1] + rings[2], rings[1] + rings[2], rings[2]];
            let mut rate = within[0] / (2.0 * m * band * sep);
            for (r, &count) in within.iter().enumerate().skip(1) {
                if count >= 8.0 {
                    let width = band / (1 << r) as f64;
                    rate = rate.max(count / (2.0 * m * width * sep));
                }
            }
            edges.push((i, j, rate));
        }
        Self::with_edges(edges, n)
    }

    /// Exact Laplacian: facet length over site separation.
    fn from_cells(cells: &[Cell], targets: &PointCloud) -> Self {
        let mut edges = Vec::new();
        for (i, c) in cells.iter().enumerate() {
            for &(j, len) in &c.facets {
                let sep = sq_dist(targets.point(i), targets.point(j)).sqrt();
                if i < j && sep > 0.0 {
                    edges.push((i, j, len / sep));
                }
            }
        }
        Self::with_edges(edges, cells.len())
    }

    fn with_edges(edges: Vec<(usize, usize, f64)>, n: usize) -> Self {
        let mut diag = vec![0.0; n];
        for &(i, j, w) in &edges {
            diag[i] += w;
            diag[j] += w;
        }
        Laplacian { edges, diag }
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (o, (d, x)) in out.iter_mut().zip(self.diag.iter().zip(v)) {
            *o = d * x;
        }
        for &(i, j, w) in &self.edges {
            out[i] -= w * v[j];
            out[j] -= w * v[i];
        }
    }

    /// Solves `(L + D) x = rhs` with `D` a diagonal floor for poorly sampled
    /// cells, raised where needed so that no single cell's own step exceeds
    /// `caps[i]` (collective shifts stay unrestricted).
    fn solve(&self, rhs: &[f64], caps: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let floor = median_positive(&self.diag).map_or(1.0, |m| 0.1 * m);
        let extra: Vec<f64> = (0..n)
            .map(|i| {
                let d = self.diag[i];
                let lifted = d + (floor - d).max(0.0) + 1e-4 * floor;
                lifted.max(rhs[i].abs() / caps[i]) - d
            })
            .collect();
        self.solve_shifted(rhs, &extra, 1e-10)
    }

    /// Solves `L x = rhs` for an exact Laplacian; isolated cells get a unit
    /// median-scaled diagonal so the system stays definite.
    fn solve_exact(&self, rhs: &[f64]) -> Vec<f64> {
        let med = median_positive(&self.diag).unwrap_or(1.0);
        let extra: Vec<f64> = self
            .diag
            .iter()
            .map(|&d| if d > 0.0 { 1e-12 * med } else { med })
            .collect();
        self.solve_shifted(rhs, &extra, 1e-12)
    }

    fn solve_shifted(&self, rhs: &[f64], extra: &[f64], rel_tol: f64) -> Vec<f64> {
        let n = rhs.len();
        let apply = |v: &[f64], out: &mut [f64]| {
            self.apply(v, out);
            for i in 0..n {
                out[i] += extra[i] * v[i];
            }
        };
        let precond: Vec<f64> = (0..n).map(|i| 1.0 / (self.diag[i] + extra[i])).collect();
        conjugate_gradient(apply, &precond, rhs, rel_tol, 4 * n.max(50))
    }
}

fn median_positive(values: &[f64]) -> Option<f64> {
    let mut positive: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
    if positive.is_empty() {
        return None;
    }
    let mid = positive.len() / 2;
    let (_, med, _) = positive.select_nth_unstable_by(mid, f64::total_cmp);
    Some(*med)
}

fn conjugate_gradient<A>(apply: A, precond: &[f64], b: &[f64], rel_tol: f64, max_iter: usize) -> Vec<f64>
where
    A: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(precond).map(|(a, p)| a * p).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return x;
    }
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= rel_tol * b_norm {
            break;
        }
        for i in 0..n {
            z[i] = r[i] * precond[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// Largest facet displacement per Newton step, in units of the cell's width.
const TRUST: f64 = 0.5;

/// Distance from each target to its nearest distinct neighbor.
fn nearest_separation(targets: &PointCloud) -> Vec<f64> {
    let index = PowerIndex::new(targets.dim(), targets.as_flat(), &vec![0.0; targets.len()]);
    targets
        .iter()
        .enumerate()
        .map(|(i, z)| {
            index
                .k_nearest(z, 8)
                .into_iter()
                .filter(|&(s, j)| j != i && s > 0.0)
                .map(|(s, _)| (2.0 * s).sqrt())
                .next()
                .unwrap_or(1.0)
        })
        .collect()
}

/// Result of one damped Newton run at a fixed level.
struct NewtonRun {
    h: DualPotential,
    iterations: usize,
}

struct NewtonSettings {
    tolerance: f64,
    samples: usize,
    max_samples: usize,
    max_iterations: usize,
}

/// Damped Newton ascent from `h`.
///
/// Each stage fixes one Monte Carlo sample set, so the current and trial
/// iterates are compared on identical samples. A trial is accepted when the
/// gradient norm shrinks by `1 − α/2` and no cell collapses; otherwise the
/// step halves. Once the gradient reaches the stage's noise floor, the
/// sample count doubles; `verify` decides final acceptance.
fn newton_run<V, O>(
    problem: &SdotProblem,
    mut h: DualPotential,
    settings: &NewtonSettings,
    rng: &RngStream,
    mut verify: V,
    mut observe: O,
) -> NewtonRun
where
    V: FnMut(&DualPotential) -> bool,
    O: FnMut(&DualPotential, f64),
{
    let (n, d) = (problem.len(), problem.dim());
    let weights = &problem.weights;
    let max_weight = weights.iter().copied().fold(0.0, f64::max);
    let mut samples = settings.samples.min(settings.max_samples);
    let mut stage = 0u64;
    let targets = problem.targets.as_flat();
    let separation = nearest_separation(&problem.targets);

    let fresh_pass = |h: &DualPotential, samples: usize, stream: &RngStream| {
        let index = PowerIndex::new(d, targets, &h.0);
        let guess = vec![BAND_FRACTION * (n as f64).powf(-1.0 / d as f64); n];
        let probe = newton_pass(problem, &index, &guess, samples, stream);
        newton_pass(problem, &index, &probe.next_bands(d), samples, stream)
    };
    let mut stream = rng.split(stage);
    let mut pass = fresh_pass(&h, samples, &stream);
    let mut grad = pass.gradient(weights);
    let mut alpha = 1.0f64;
    observe(&h, grad.iter().fold(0.0f64, |m, g| m.max(g.abs())));

    for iter in 1..=settings.max_iterations {
        let m = samples as f64;
        let floor = (weights.iter().map(|v| v * (1.0 - v)).sum::<f64>() / m).sqrt();
        let g_norm = l2(&grad);
        let dev = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        // the sampled problem is solved as far as this sample size can tell
        if g_norm <= floor || dev <= 0.5 * settings.tolerance {
            // largest cell error expected from sampling alone
            let noise = 3.0 * (max_weight / m).sqrt();
            if (dev + noise <= settings.tolerance || samples >= settings.max_samples) && verify(&h) {
                return NewtonRun { h, iterations: iter };
            }
            if samples >= settings.max_samples {
                return NewtonRun { h, iterations: iter };
            }
            samples = (2 * samples).min(settings.max_samples);
            stage += 1;
            stream = rng.split(stage);
            pass = fresh_pass(&h, samples, &stream);
            grad = pass.gradient(weights);
            alpha = 1.0;
            continue;
        }

        // the facets of cell i move by at most TRUST times its width
        let caps: Vec<f64> = (0..n)
            .map(|i| TRUST * ((pass.hits[i] as f64).max(0.5) / m).powf(1.0 / d as f64) * separation[i])
            .collect();
        let lap = Laplacian::estimate(&pass, &problem.targets);
        let step = lap.solve(&grad, &caps);
        let slope: f64 = step.iter().zip(&grad).map(|(s, g)| s * g).sum();
        let mut trial = h.clone();
        for (t, s) in trial.0.iter_mut().zip(&step) {
            *t += alpha * s;
        }
        trial.gauge_fix();
        let index = PowerIndex::new(d, targets, &trial.0);
        let next = newton_pass(problem, &index, &pass.next_bands(d), samples, &stream);
        let next_grad = next.gradient(weights);
        let gain = next.objective(weights, &trial) - pass.objective(weights, &h);
        // Armijo on the sampled concave objective
        if slope > 0.0 && gain >= 1e-4 * alpha * slope {
            h = trial;
            pass = next;
            grad = next_grad;
            observe(&h, grad.iter().fold(0.0f64, |m, g| m.max(g.abs())));
            alpha = (2.0 * alpha).min(1.0);
        } else {
            alpha *= 0.5;
            if alpha < 1e-4 {
                // the local model is too coarse: resample with more points
                if samples >= settings.max_samples {
                    return NewtonRun { h, iterations: iter };
                }
                samples = (2 * samples).min(settings.max_samples);
                stage += 1;
                stream = rng.split(stage);
                pass = fresh_pass(&h, samples, &stream);
                grad = pass.gradient(weights);
                alpha = 1.0;
            }
        }
    }
    NewtonRun { h, iterations: settings.max_iterations }
}

/// Damped Newton ascent. Planar problems use exact cell geometry; other
/// dimensions work from Monte Carlo estimates of masses and facet rates.
fn newton_ascent<F>(
    problem: &SdotProblem,
    config: &SolverConfig,
    rng: &RngStream,
    mut observe: F,
) -> Result<SolveReport>
where
    F: FnMut(usize, &DualPotential),
{
    if problem.dim() == 2 {
        return exact_newton(problem, config, rng, observe);
    }
    let mut verifier = Verifier::new(problem, config, rng);
    let mut trace = Vec::new();
    let mut accepted = 0usize;
    let mut verified = None;
    let settings = NewtonSettings {
        tolerance: config.tolerance,
        samples: config.mc_samples,
        max_samples: config.verify_samples.max(config.mc_samples),
        max_iterations: config.max_iterations,
    };
    let run = newton_run(
        problem,
        voronoi_initial_potential(problem),
        &settings,
        &rng.split_named("newton"),
        |h| {
            let Ok(locator) = CellLocator::new(problem, h) else {
                return false;
            };
            let stats = verifier.verify(&locator);
            let dev = stats.max_deviation(&problem.weights);
            verifier.note(dev, h);
            if dev <= config.tolerance {
                verified = Some((h.clone(), stats));
                true
            } else {
                false
            }
        },
        |h, dev| {
            trace.push(dev);
            observe(accepted, h);
            accepted += 1;
        },
    );
    if verified.is_none() {
        let locator = CellLocator::new(problem, &run.h)?;
        let stats = verifier.verify(&locator);
        verifier.note(stats.max_deviation(&problem.weights), &run.h);
    }
    verifier.finish(verified, run.iterations, trace)
}

// Exact residual, as a fraction of the tolerance, at which the planar solver
// hands over to the sampled verification.
const EXACT_MARGIN: f64 = 0.05;

/// Damped Newton on exact planar cells. A step is accepted when it raises
/// the dual by an Armijo margin and keeps every cell above half the smaller
/// of the initial smallest cell and the smallest weight; otherwise it halves.
fn exact_newton<F>(
    problem: &SdotProblem,
    config: &SolverConfig,
    rng: &RngStream,
    mut observe: F,
) -> Result<SolveReport>
where
    F: FnMut(usize, &DualPotential),
{
    let (targets, weights) = (&problem.targets, &problem.weights);
    let mut verifier = Verifier::new(problem, config, rng);
    let mut h = voronoi_initial_potential(problem);
    let mut cells = power_cells(targets, &h.0);
    let mut value = dual_value(targets, weights, &h.0, &cells);
    let min_area = |cells: &[Cell]| cells.iter().map(|c| c.area).fold(f64::INFINITY, f64::min);
    let min_weight = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let keep = 0.5 * min_area(&cells).min(min_weight);
    let mut trace = Vec::new();
    let mut iterations = 0;

    for iter in 0..config.max_iterations {
        iterations = iter + 1;
        let grad: Vec<f64> = weights.iter().zip(&cells).map(|(v, c)| v - c.area).collect();
        let dev = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        trace.push(dev);
        observe(iter, &h);
        if dev <= EXACT_MARGIN * config.tolerance {
            break;
        }
        let step = Laplacian::from_cells(&cells, targets).solve_exact(&grad);
        let slope: f64 = step.iter().zip(&grad).map(|(s, g)| s * g).sum();
        let mut alpha = 1.0;
        let accepted = loop {
            let mut trial = h.clone();
            for (t, s) in trial.0.iter_mut().zip(&step) {
                *t += alpha * s;
            }
            trial.gauge_fix();
            let next = power_cells(targets, &trial.0);
            let next_value = dual_value(targets, weights, &trial.0, &next);
            if min_area(&next) >= keep && next_value - value >= 1e-4 * alpha * slope {
                break Some((trial, next, next_value));
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                break None;
            }
        };
        match accepted {
            Some((trial, next, next_value)) => {
                h = trial;
                cells = next;
                value = next_value;
            }
            // rounding limits further progress
            None => break,
        }
    }
    let locator = CellLocator::new(problem, &h)?;
    let stats = verifier.verify(&locator);
    verifier.finish(Some((h, stats)), iterations, trace)
}

/// JSON checkpoint of a solved transport map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdotCheckpoint {
    pub dim: usize,
    pub n: usize,
    pub epsilon: f64,
    pub h: Vec<f64>,
    pub measures: Vec<f64>,
    pub barycenters: Vec<Option<Vec<f64>>>,
    pub sample_count: usize,
    pub converged: bool,
    pub seed: u64,
}

impl SdotCheckpoint {
    pub fn new(
        problem: &SdotProblem,
        report: &SolveReport,
        epsilon: f64,
        seed: u64,
    ) -> Self {
        SdotCheckpoint {
            dim: problem.dim(),
            n: problem.len(),
            epsilon,
            h: report.potential.0.clone(),
            measures: report.stats.measures.clone(),
            barycenters: report
                .stats
                .barycenters
                .iter()
                .map(|b| b.as_ref().map(|p| p.coords().to_vec()))
                .collect(),
            sample_count: report.stats.sample_count,
            converged: report.converged,
            seed,
        }
    }

    pub fn potential(&self) -> DualPotential {
        DualPotential(self.h.clone())
    }

    pub fn cell_stats(&self) -> Result<CellStats> {
        let barycenters = self
            .barycenters
            .iter()
            .map(|b| b.clone().map(Point::new).transpose())
            .collect::<Result<Vec<_>>>()?;
        let hits = self
            .measures
            .iter()
            .map(|m| (m * self.sample_count as f64).round() as u64)
            .collect();
        Ok(CellStats {
            measures: self.measures.clone(),
            barycenters,
            hits,
            sample_count: self.sample_count,
        })
    }
}
