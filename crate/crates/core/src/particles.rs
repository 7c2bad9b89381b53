//! Direct simulation of the N-pedestrian system under a fixed feedback
//! control, its empirical risks, and Wasserstein-2 diagnostics against the
//! mean-field density.
//!
//! Particle `i` draws its initial position and all of its Brownian
//! increments from ChaCha stream `i` of the ensemble seed, so results do not
//! depend on the order in which particles are advanced.
//!
//! Controls, terminal costs and kernel values are looked up at the nearest
//! grid cell; the kernel is evaluated at the wrapped difference of the two
//! particles' cell indices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::forward::Dynamics;
use crate::grid::{check_density_slice, ControlField, SpaceTimeField, TimeGrid, TorusGrid};
use crate::kernel::AversionKernel;

/// Trajectories of `N` particles, stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    n: usize,
    seed: u64,
    positions: SpaceTimeField,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_slices(&self) -> usize {
        self.positions.n_slices()
    }

    /// Positions of all particles at time index `k`.
    pub fn at(&self, k: usize) -> &[f64] {
        self.positions.slice(k)
    }

    pub fn position(&self, particle: usize, k: usize) -> f64 {
        self.positions.slice(k)[particle]
    }

    /// Path of one particle.
    pub fn trajectory(&self, particle: usize) -> Vec<f64> {
        self.positions.slices().map(|s| s[particle]).collect()
    }
}

/// Fixed inputs of a particle simulation.
#[derive(Debug, Clone, Copy)]
pub struct ParticleSetup<'a> {
    pub control: &'a ControlField,
    pub m0: &'a [f64],
    pub dynamics: &'a Dynamics,
    pub grid: &'a TorusGrid,
    pub time: &'a TimeGrid,
}

impl ParticleSetup<'_> {
    fn validate(&self) -> Result<()> {
        check_density_slice(self.m0, self.grid)?;
        check_len("control time slices", self.time.n_t(), self.control.n_slices())?;
        check_len("control width", self.grid.n_x(), self.control.values().n_x())?;
        Ok(())
    }
}

/// Cumulative distribution of a cell density, used for inverse sampling.
fn cell_cdf(m0: &[f64], grid: &TorusGrid) -> Vec<f64> {
    let h = grid.h();
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = m0
        .iter()
        .map(|v| {
            acc += v * h;
            acc
        })
        .collect();
    let total = acc;
    cdf.iter_mut().for_each(|c| *c /= total);
    cdf
}

fn particle_rng(seed: u64, particle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(particle as u64);
    rng
}

/// Draws a position from the cell density: a cell by inverse CDF, then a
/// uniform offset inside it.
fn sample_initial(rng: &mut ChaCha8Rng, cdf: &[f64], grid: &TorusGrid) -> f64 {
    let u: f64 = rng.random();
    let cell = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
    let offset: f64 = rng.random_range(-0.5..0.5);
    grid.wrap_position((cell as f64 + offset) * grid.h())
}

/// Advances every particle through all time steps, calling `observe(k, x)`
/// with the positions at each time index `k = 0..=n_t`.
fn run_particles(
    n: usize,
    setup: &ParticleSetup<'_>,
    seed: u64,
    mut observe: impl FnMut(usize, &[f64]),
) {
    let grid = setup.grid;
    let cdf = cell_cdf(setup.m0, grid);
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| particle_rng(seed, i)).collect();
    let mut x: Vec<f64> = rngs
        .iter_mut()
        .map(|rng| sample_initial(rng, &cdf, grid))
        .collect();
    observe(0, &x);
    let dt = setup.time.dt();
    let noise = setup.dynamics.sigma() * dt.sqrt();
    for k in 0..setup.time.n_t() {
        let a = setup.control.slice(k);
        for (xi, rng) in x.iter_mut().zip(rngs.iter_mut()) {
            let z: f64 = rng.sample(StandardNormal);
            let drift = a[grid.nearest_cell(*xi)];
            *xi = grid.wrap_position(*xi + drift * dt + noise * z);
        }
        observe(k + 1, &x);
    }
}

/// Euler-Maruyama simulation of `n` particles started i.i.d. from `m0`.
pub fn simulate_particles(n: usize, setup: ParticleSetup<'_>, seed: u64) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one particle".into()));
    }
    setup.validate()?;
    let mut positions = SpaceTimeField::zeros(setup.time.n_t() + 1, n);
    run_particles(n, &setup, seed, |k, x| positions.slice_mut(k).copy_from_slice(x));
    Ok(ParticleEnsemble { n, seed, positions })
}

/// Kernel table used for particle interactions; local mode becomes the
/// discrete point mass `1/h` at offset zero.
fn interaction_table(kernel: &AversionKernel, grid: &TorusGrid) -> Vec<f64> {
    if kernel.is_local() {
        let mut t = vec![0.0; grid.n_x()];
        t[0] = 1.0 / grid.h();
        t
    } else {
        kernel.weights().to_vec()
    }
}

/// Cost data for empirical risks.
#[derive(Debug, Clone, Copy)]
pub struct EmpiricalCost<'a> {
    pub control: &'a ControlField,
    pub kernel: &'a AversionKernel,
    pub aversion_weight: f64,
    pub psi: &'a [f64],
    pub grid: &'a TorusGrid,
    pub time: &'a TimeGrid,
}

/// Accumulates every particle's running and terminal cost time step by time
/// step.
struct RiskAccumulator<'a> {
    cost: EmpiricalCost<'a>,
    table: Vec<f64>,
    cells: Vec<usize>,
    counts: Vec<f64>,
    crowded: Vec<f64>,
    risk: Vec<f64>,
}

impl<'a> RiskAccumulator<'a> {
    fn new(n: usize, cost: EmpiricalCost<'a>) -> Self {
        let n_x = cost.grid.n_x();
        Self {
            table: interaction_table(cost.kernel, cost.grid),
            cost,
            cells: vec![0; n],
            counts: vec![0.0; n_x],
            crowded: vec![0.0; n_x],
            risk: vec![0.0; n],
        }
    }

    fn observe(&mut self, k: usize, x: &[f64]) {
        let grid = self.cost.grid;
        let n = x.len();
        for (c, xi) in self.cells.iter_mut().zip(x) {
            *c = grid.nearest_cell(*xi);
        }
        if k == self.cost.time.n_t() {
            for (r, c) in self.risk.iter_mut().zip(&self.cells) {
                *r += self.cost.psi[*c];
            }
            return;
        }
        let dt = self.cost.time.dt();
        let a = self.cost.control.slice(k);
        let with_aversion = self.cost.aversion_weight != 0.0 && n > 1;
        if with_aversion {
            let n_x = grid.n_x();
            self.counts.fill(0.0);
            for c in &self.cells {
                self.counts[*c] += 1.0;
            }
            // crowded[c] = sum_j table[(c - c_j) mod n_x]
            self.crowded.fill(0.0);
            for (src, &count) in self.counts.iter().enumerate() {
                if count == 0.0 {
                    continue;
                }
                for (d, &w) in self.table.iter().enumerate() {
                    if w != 0.0 {
                        let dst = if src + d >= n_x { src + d - n_x } else { src + d };
                        self.crowded[dst] += count * w;
                    }
                }
            }
        }
        let scale = self.cost.aversion_weight / (n.max(2) - 1) as f64;
        let self_weight = self.table[0];
        for (r, c) in self.risk.iter_mut().zip(&self.cells) {
            let ai = a[*c];
            let mut running = 0.5 * ai * ai;
            if with_aversion {
                running += scale * (self.crowded[*c] - self_weight);
            }
            *r += dt * running;
        }
    }
}

fn check_cost(cost: &EmpiricalCost<'_>, n_slices: usize) -> Result<()> {
    let (grid, time) = (cost.grid, cost.time);
    check_len("ensemble time slices", time.n_t() + 1, n_slices)?;
    check_len("control time slices", time.n_t(), cost.control.n_slices())?;
    check_len("control width", grid.n_x(), cost.control.values().n_x())?;
    check_len("terminal cost", grid.n_x(), cost.psi.len())?;
    if !cost.kernel.is_local() {
        check_len("kernel width", grid.n_x(), cost.kernel.n_x())?;
    }
    Ok(())
}

/// Empirical risk of every particle:
/// `sum_k dt [a^2/2 + C/(N-1) sum_{j != i} phi(X_i - X_j)] + psi(X_i(T))`.
/// With a single particle the aversion term is zero.
pub fn empirical_risks(ensemble: &ParticleEnsemble, cost: EmpiricalCost<'_>) -> Result<Vec<f64>> {
    check_cost(&cost, ensemble.n_slices())?;
    let mut acc = RiskAccumulator::new(ensemble.len(), cost);
    for k in 0..ensemble.n_slices() {
        acc.observe(k, ensemble.at(k));
    }
    Ok(acc.risk)
}

/// Empirical risk of particle `i`.
pub fn empirical_risk(i: usize, ensemble: &ParticleEnsemble, cost: EmpiricalCost<'_>) -> Result<f64> {
    if i >= ensemble.len() {
        return Err(Error::InvalidArgument(format!(
            "particle index {i} out of range for {} particles",
            ensemble.len()
        )));
    }
    Ok(empirical_risks(ensemble, cost)?[i])
}

/// Cell histogram of the particles at time index `k`, normalized to a
/// density: `count / (N h)`.
pub fn empirical_histogram(ensemble: &ParticleEnsemble, k: usize, grid: &TorusGrid) -> Result<Vec<f64>> {
    if k >= ensemble.n_slices() {
        return Err(Error::InvalidArgument(format!(
            "time index {k} out of range for {} slices",
            ensemble.n_slices()
        )));
    }
    Ok(histogram(ensemble.at(k), grid))
}

fn histogram(x: &[f64], grid: &TorusGrid) -> Vec<f64> {
    let mut out = vec![0.0; grid.n_x()];
    let w = 1.0 / (x.len() as f64 * grid.h());
    for xi in x {
        out[grid.nearest_cell(*xi)] += w;
    }
    out
}

/// Wasserstein-2 distance between two equal-size empirical measures on the
/// circle of circumference `length`, with geodesic ground distance.
///
/// Some optimal coupling of sorted samples is a cyclic shift, so the
/// minimum over all `N` shifts is exact.
pub fn wasserstein2_circle(a: &[f64], b: &[f64], length: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("wasserstein2 needs nonempty samples".into()));
    }
    check_len("wasserstein2 sample sizes", a.len(), b.len())?;
    let sorted = |s: &[f64]| -> Vec<f64> {
        let mut v: Vec<f64> = s.iter().map(|x| x.rem_euclid(length)).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let (a, b) = (sorted(a), sorted(b));
    let n = a.len();
    let geodesic = |x: f64, y: f64| {
        let d = (x - y).rem_euclid(length);
        d.min(length - d)
    };
    let mut best = f64::INFINITY;
    for shift in 0..n {
        let mut cost = 0.0;
        for i in 0..n {
            let j = if i + shift >= n { i + shift - n } else { i + shift };
            let d = geodesic(a[i], b[j]);
            cost += d * d;
            if cost >= best {
                break;
            }
        }
        best = best.min(cost);
    }
    Ok((best / n as f64).sqrt())
}

/// Quantiles of a cell density at levels `(k - 1/2)/n`, `k = 1..=n`, with the
/// density taken piecewise constant on cells `[x_i - h/2, x_i + h/2)` and the
/// cumulative distribution started at `-h/2`.
pub fn density_quantiles(density: &[f64], grid: &TorusGrid, n: usize) -> Result<Vec<f64>> {
    check_len("density", grid.n_x(), density.len())?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one quantile".into()));
    }
    let h = grid.h();
    let total: f64 = density.iter().sum::<f64>() * h;
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::InvalidArgument("density has no mass".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut cell = 0;
    let mut below = 0.0;
    for k in 0..n {
        let level = (k as f64 + 0.5) / n as f64 * total;
        while cell + 1 < density.len() && below + density[cell] * h < level {
            below += density[cell] * h;
            cell += 1;
        }
        let frac = if density[cell] > 0.0 {
            ((level - below) / (density[cell] * h)).clamp(0.0, 1.0)
        } else {
            0.5
        };
        out.push(grid.wrap_position((cell as f64 - 0.5 + frac) * h));
    }
    Ok(out)
}

/// W2 between a particle sample and a cell density.
pub fn wasserstein2_to_density(sample: &[f64], density: &[f64], grid: &TorusGrid) -> Result<f64> {
    let q = density_quantiles(density, grid, sample.len())?;
    wasserstein2_circle(sample, &q, grid.length())
}

/// One row of the particle convergence table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub seed: u64,
    pub mean_empirical_risk: f64,
    pub mean_field_risk: f64,
    pub risk_gap: f64,
    pub w2_terminal: f64,
}

/// Runs `n` particles without storing paths and returns the mean empirical
/// risk, the terminal positions and histograms at the requested time indices.
pub fn stream_particles(
    n: usize,
    setup: ParticleSetup<'_>,
    cost: EmpiricalCost<'_>,
    seed: u64,
    checkpoints: &[usize],
) -> Result<StreamedRun> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one particle".into()));
    }
    setup.validate()?;
    check_cost(&cost, setup.time.n_t() + 1)?;
    let mut acc = RiskAccumulator::new(n, cost);
    let mut terminal = Vec::new();
    let mut snapshots = Vec::new();
    let n_t = setup.time.n_t();
    run_particles(n, &setup, seed, |k, x| {
        acc.observe(k, x);
        if checkpoints.contains(&k) {
            snapshots.push((k, x.to_vec()));
        }
        if k == n_t {
            terminal = x.to_vec();
        }
    });
    Ok(StreamedRun {
        risks: acc.risk,
        terminal,
        snapshots,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamedRun {
    pub risks: Vec<f64>,
    pub terminal: Vec<f64>,
    /// `(time index, positions)` for each requested checkpoint.
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

impl StreamedRun {
    pub fn mean_risk(&self) -> f64 {
        self.risks.iter().sum::<f64>() / self.risks.len() as f64
    }
}

/// Seed of the `s`-th replicate; shared across ensemble sizes so that larger
/// ensembles extend smaller ones.
pub fn replicate_seed(base_seed: u64, s: usize) -> u64 {
    base_seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(s as u64 + 1))
}

/// Empirical-versus-mean-field table over an ensemble-size ladder.
pub fn convergence_study(
    setup: ParticleSetup<'_>,
    cost: EmpiricalCost<'_>,
    terminal_density: &[f64],
    mean_field_risk: f64,
    sizes: &[usize],
    replicates: usize,
    base_seed: u64,
) -> Result<Vec<ConvergenceRow>> {
    let mut rows = Vec::with_capacity(sizes.len() * replicates);
    for &n in sizes {
        for s in 0..replicates {
            let seed = replicate_seed(base_seed, s);
            let run = stream_particles(n, setup, cost, seed, &[])?;
            let mean = run.mean_risk();
            rows.push(ConvergenceRow {
                n,
                seed,
                mean_empirical_risk: mean,
                mean_field_risk,
                risk_gap: (mean - mean_field_risk).abs(),
                w2_terminal: wasserstein2_to_density(&run.terminal, terminal_density, setup.grid)?,
            });
        }
    }
    Ok(rows)
}
