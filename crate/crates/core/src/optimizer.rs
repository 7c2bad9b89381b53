//! Projected gradient descent on the pooled control objective, plus the
//! maximum-principle diagnostics used to certify its output.
//!
//! One iteration: forward densities, backward costates, the L2 gradient
//! `g = (a + dp/dx) m`, then a backtracking search on
//! `clamp(a - tau g, +-a_max)` until the risk strictly decreases.
//!
//! The spatial derivative of the costate is the central difference taken at
//! the end of the control interval (`p_{k+1}` pairs with `a_k` and `m_k`).
//! This is the exact derivative of the discrete risk through the forward
//! step, whose drift part is affine in the control.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint_unchecked, AdjointInputs};
use crate::error::{check_len, Error, Result};
use crate::forward::solve_forward_unchecked;
use crate::grid::{clamp_control, AdjointField, ControlField, DensityField, SpaceTimeField, TimeGrid, TorusGrid};
use crate::problem::MultiCrowdProblem;
use crate::risk::{crowd_risk_unchecked, pooled_risk_unchecked, RiskBreakdown};

/// Backtracking halvings allowed per iteration before the search stalls.
pub const MAX_BACKTRACKS: usize = 30;

/// Search direction of the descent loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `a - argmin_a H`: the L2 gradient divided by the density. Keeps the
    /// step scale independent of how thinly a region is populated.
    #[default]
    Hamiltonian,
    /// Plain projected L2 gradient `(a + dp) m`.
    Gradient,
}

/// Trial step of each line search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Barzilai-Borwein length `<s,s>/<s,y>` from the last accepted move,
    /// capped at `tau0`.
    #[default]
    BarzilaiBorwein,
    /// Previous accepted step, doubled after a search without backtracking.
    Carried,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdmParams {
    pub direction: Direction,
    pub step_rule: StepRule,
    /// Initial (and maximal) step size.
    pub tau0: f64,
    /// Backtracking factor.
    pub shrink: f64,
    pub max_iters: usize,
    /// Stop once the last `window` accepted steps together lower the risk
    /// by less than this fraction.
    pub rel_tol: f64,
    pub window: usize,
    /// Convergence also needs the optimality residual at or below this
    /// fraction of its initial value, so that a pause in the risk decrease
    /// is not mistaken for stationarity.
    pub residual_rtol: f64,
    /// Control box half-width.
    pub a_max: f64,
}

impl Default for GdmParams {
    fn default() -> Self {
        Self {
            direction: Direction::Hamiltonian,
            step_rule: StepRule::BarzilaiBorwein,
            tau0: 1.0,
            shrink: 0.5,
            max_iters: 500,
            rel_tol: 1e-6,
            window: 10,
            residual_rtol: 1e-2,
            a_max: 10.0,
        }
    }
}

impl GdmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0.is_finite() && self.tau0 > 0.0) {
            return Err(Error::InvalidArgument(format!("tau0 must be positive, got {}", self.tau0)));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "shrink must lie in (0, 1), got {}",
                self.shrink
            )));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "rel_tol must be positive, got {}",
                self.rel_tol
            )));
        }
        if !(self.residual_rtol.is_finite() && self.residual_rtol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "residual_rtol must be positive, got {}",
                self.residual_rtol
            )));
        }
        if self.window == 0 {
            return Err(Error::InvalidArgument("window must be at least 1".into()));
        }
        if !(self.a_max.is_finite() && self.a_max > 0.0) {
            return Err(Error::InvalidArgument(format!("a_max must be positive, got {}", self.a_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub risk: RiskBreakdown,
    /// Step size accepted to reach this iterate (0 for the initial point).
    pub step: f64,
    pub grad_norm: f64,
    pub opt_residual: f64,
}

/// Accepted iterates of one optimization run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GdmTrace {
    pub entries: Vec<TraceEntry>,
}

impl GdmTrace {
    pub fn risks(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.risk.total).collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].risk.total <= w[0].risk.total)
    }

    /// `risk_history.csv` layout.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "iter,risk_total,risk_energy,risk_aversion,risk_terminal,step,grad_norm,opt_residual"
        )?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                e.iter,
                e.risk.total,
                e.risk.energy,
                e.risk.aversion,
                e.risk.terminal,
                e.step,
                e.grad_norm,
                e.opt_residual
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Relative decrease fell below `rel_tol` with a small optimality
    /// residual, or no decrease was left at a point with a small residual.
    Converged,
    /// Gradient (or projected step) vanished.
    Stationary,
    MaxIters,
    /// No decrease found within [`MAX_BACKTRACKS`] halvings while the
    /// residual was still large.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct GdmOutcome {
    pub controls: Vec<ControlField>,
    pub densities: Vec<DensityField>,
    pub adjoints: Vec<AdjointField>,
    pub trace: GdmTrace,
    pub stop: StopReason,
}

impl GdmOutcome {
    pub fn stalled(&self) -> bool {
        self.stop == StopReason::Stalled
    }

    pub fn risk(&self) -> RiskBreakdown {
        self.trace.entries.last().expect("trace has the initial point").risk
    }

    pub fn iterations(&self) -> usize {
        self.trace.entries.len() - 1
    }
}

/// Central costate difference `(p[i+1] - p[i-1]) / 2h`.
#[inline]
fn central(p: &[f64], i: usize, inv_2h: f64) -> f64 {
    let n = p.len();
    let r = if i + 1 == n { 0 } else { i + 1 };
    let l = if i == 0 { n - 1 } else { i - 1 };
    (p[r] - p[l]) * inv_2h
}

/// Pointwise minimizer of `a^2/2 + a dp` over `[-a_max, a_max]`.
#[inline]
pub fn hamiltonian_minimizer(dp: f64, a_max: f64) -> f64 {
    (-dp).clamp(-a_max, a_max)
}

fn check_triple(
    control: &ControlField,
    density: &DensityField,
    adjoint: &AdjointField,
    grid: &TorusGrid,
    time: &TimeGrid,
) -> Result<()> {
    check_len("control time slices", time.n_t(), control.n_slices())?;
    check_len("control width", grid.n_x(), control.values().n_x())?;
    check_len("density time slices", time.n_t() + 1, density.n_slices())?;
    check_len("density width", grid.n_x(), density.values().n_x())?;
    check_len("adjoint time slices", time.n_t() + 1, adjoint.n_slices())?;
    check_len("adjoint width", grid.n_x(), adjoint.values().n_x())?;
    Ok(())
}

/// L2 gradient of the pooled risk with respect to one crowd's control,
/// `g(t_k, x_i) = (a + dp) m` with `dp` as documented at module level.
/// `density` and `adjoint` must come from this control; that provenance is
/// not checkable here.
pub fn control_gradient(
    control: &ControlField,
    density: &DensityField,
    adjoint: &AdjointField,
    grid: &TorusGrid,
    time: &TimeGrid,
) -> Result<SpaceTimeField> {
    check_triple(control, density, adjoint, grid, time)?;
    Ok(gradient_unchecked(
        control.values(),
        density.values(),
        adjoint.values(),
        grid,
    ))
}

fn gradient_unchecked(a: &SpaceTimeField, m: &SpaceTimeField, p: &SpaceTimeField, grid: &TorusGrid) -> SpaceTimeField {
    let n_t = a.n_slices();
    let n_x = grid.n_x();
    let inv_2h = 0.5 / grid.h();
    let mut g = SpaceTimeField::zeros(n_t, n_x);
    for k in 0..n_t {
        let (ak, mk, pk) = (a.slice(k), m.slice(k), p.slice(k + 1));
        let gk = g.slice_mut(k);
        for i in 0..n_x {
            let dp = central(pk, i, inv_2h);
            gk[i] = (ak[i] + dp) * mk[i];
        }
    }
    g
}

/// Maximum over crowds of the density-weighted L2 distance between the
/// control and the pointwise Hamiltonian minimizer. Away from the box bound
/// this is the weighted norm of `a + dp/dx`.
pub fn optimality_residual(
    controls: &[ControlField],
    densities: &[DensityField],
    adjoints: &[AdjointField],
    grid: &TorusGrid,
    time: &TimeGrid,
) -> Result<f64> {
    check_len("densities per crowd", controls.len(), densities.len())?;
    check_len("adjoints per crowd", controls.len(), adjoints.len())?;
    let mut worst: f64 = 0.0;
    for j in 0..controls.len() {
        check_triple(&controls[j], &densities[j], &adjoints[j], grid, time)?;
        worst = worst.max(crowd_residual(
            controls[j].values(),
            densities[j].values(),
            adjoints[j].values(),
            controls[j].a_max(),
            grid,
            time,
        ));
    }
    Ok(worst)
}

fn crowd_residual(
    a: &SpaceTimeField,
    m: &SpaceTimeField,
    p: &SpaceTimeField,
    a_max: f64,
    grid: &TorusGrid,
    time: &TimeGrid,
) -> f64 {
    let inv_2h = 0.5 / grid.h();
    let mut sum = 0.0;
    for k in 0..a.n_slices() {
        let (ak, mk, pk) = (a.slice(k), m.slice(k), p.slice(k + 1));
        for i in 0..ak.len() {
            let dp = central(pk, i, inv_2h);
            let gap = ak[i] - hamiltonian_minimizer(dp, a_max);
            sum += gap * gap * mk[i];
        }
    }
    (sum * grid.h() * time.dt()).sqrt()
}

/// Densities and pooled risk at one control.
struct Point {
    controls: Vec<SpaceTimeField>,
    /// Box bound per crowd; also fixes the scheme diffusion.
    a_max: Vec<f64>,
    densities: Vec<DensityField>,
    risk: RiskBreakdown,
}

fn evaluate(problem: &MultiCrowdProblem, controls: Vec<SpaceTimeField>, a_max: Vec<f64>) -> Point {
    let densities: Vec<DensityField> = controls
        .iter()
        .zip(problem.crowds())
        .zip(&a_max)
        .map(|((a, c), bound)| {
            solve_forward_unchecked(&c.m0, a, *bound, problem.dynamics(), problem.grid(), problem.time())
        })
        .collect();
    let a: Vec<&SpaceTimeField> = controls.iter().collect();
    let m: Vec<&SpaceTimeField> = densities.iter().map(|d| d.values()).collect();
    let risk = pooled_risk_unchecked(&a, &m, problem.weights().lambda_bar(), problem.cost_inputs());
    Point {
        controls,
        a_max,
        densities,
        risk,
    }
}

fn adjoint_inputs(problem: &MultiCrowdProblem) -> AdjointInputs<'_> {
    AdjointInputs {
        psi: problem.psi(),
        lambda_bar: problem.weights().lambda_bar(),
        kernel: problem.kernel(),
        aversion_weight: problem.aversion_weight(),
        dynamics: problem.dynamics(),
        grid: problem.grid(),
        time: problem.time(),
    }
}

fn adjoints_at(problem: &MultiCrowdProblem, point: &Point) -> Vec<AdjointField> {
    let a: Vec<&SpaceTimeField> = point.controls.iter().collect();
    let m: Vec<&SpaceTimeField> = point.densities.iter().map(|d| d.values()).collect();
    solve_adjoint_unchecked(&a, &point.a_max, &m, adjoint_inputs(problem))
}

/// Gradients, gradient norm and residual at a point.
fn diagnostics(
    problem: &MultiCrowdProblem,
    point: &Point,
    adjoints: &[AdjointField],
    a_max: f64,
    direction: Direction,
) -> (Vec<SpaceTimeField>, f64, f64) {
    let (grid, time) = (problem.grid(), problem.time());
    let inv_2h = 0.5 / grid.h();
    let mut directions = Vec::with_capacity(point.controls.len());
    let mut norm_sq = 0.0;
    let mut residual: f64 = 0.0;
    for j in 0..point.controls.len() {
        let (a, m, p) = (&point.controls[j], point.densities[j].values(), adjoints[j].values());
        let mut d = SpaceTimeField::zeros(a.n_slices(), grid.n_x());
        let (mut g_sq, mut r_sq) = (0.0, 0.0);
        for k in 0..a.n_slices() {
            let (ak, mk, pk) = (a.slice(k), m.slice(k), p.slice(k + 1));
            let dk = d.slice_mut(k);
            for i in 0..ak.len() {
                let dp = central(pk, i, inv_2h);
                let g = (ak[i] + dp) * mk[i];
                let gap = ak[i] - hamiltonian_minimizer(dp, a_max);
                g_sq += g * g;
                r_sq += gap * gap * mk[i];
                dk[i] = match direction {
                    Direction::Gradient => g,
                    Direction::Hamiltonian => gap,
                };
            }
        }
        let cell = grid.h() * time.dt();
        norm_sq += g_sq * cell;
        residual = residual.max((r_sq * cell).sqrt());
        directions.push(d);
    }
    (directions, norm_sq.sqrt(), residual)
}

fn check_controls(problem: &MultiCrowdProblem, controls: &[ControlField], a_max: f64) -> Result<()> {
    check_len("initial controls per crowd", problem.n_crowds(), controls.len())?;
    for c in controls {
        check_len("control time slices", problem.time().n_t(), c.n_slices())?;
        check_len("control width", problem.grid().n_x(), c.values().n_x())?;
        if c.a_max() > a_max {
            return Err(Error::InvalidArgument(format!(
                "initial control bound {} exceeds the optimizer box {a_max}",
                c.a_max()
            )));
        }
    }
    Ok(())
}

/// Projected gradient descent from `initial` (zero controls if `None`).
pub fn gdm_optimize(
    problem: &MultiCrowdProblem,
    params: &GdmParams,
    initial: Option<Vec<ControlField>>,
) -> Result<GdmOutcome> {
    params.validate()?;
    let a_max = params.a_max;
    problem
        .time()
        .check_cfl(problem.grid(), problem.dynamics(), a_max)?;
    let initial = match initial {
        Some(c) => {
            check_controls(problem, &c, a_max)?;
            c.into_iter().map(|c| c.into_inner()).collect()
        }
        None => (0..problem.n_crowds())
            .map(|_| SpaceTimeField::zeros(problem.time().n_t(), problem.grid().n_x()))
            .collect(),
    };

    let mut point = evaluate(problem, initial, vec![a_max; problem.n_crowds()]);
    let mut adjoints = adjoints_at(problem, &point);
    let (mut grads, grad_norm, residual) = diagnostics(problem, &point, &adjoints, a_max, params.direction);
    let mut trace = GdmTrace {
        entries: vec![TraceEntry {
            iter: 0,
            risk: point.risk,
            step: 0.0,
            grad_norm,
            opt_residual: residual,
        }],
    };
    let mut tau = params.tau0;
    let mut stop = StopReason::MaxIters;
    let mut current_grad_norm = grad_norm;
    let initial_residual = residual;
    let mut current_residual = residual;

    for iter in 1..=params.max_iters {
        if current_grad_norm == 0.0 {
            stop = StopReason::Stationary;
            break;
        }
        let mut accepted = None;
        let mut step = tau;
        let mut backtracks = 0;
        for _ in 0..=MAX_BACKTRACKS {
            let mut moved = false;
            let candidate: Vec<SpaceTimeField> = point
                .controls
                .iter()
                .zip(&grads)
                .map(|(a, g)| {
                    let mut next = a.clone();
                    for (v, gv) in next.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        let updated = clamp_control(*v - step * gv, a_max);
                        moved |= updated != *v;
                        *v = updated;
                    }
                    next
                })
                .collect();
            if !moved {
                // projected step is zero at every point: nothing left to gain
                break;
            }
            let trial = evaluate(problem, candidate, point.a_max.clone());
            if trial.risk.total < point.risk.total {
                accepted = Some(trial);
                break;
            }
            step *= params.shrink;
            backtracks += 1;
        }
        let Some(next) = accepted else {
            stop = if step == tau {
                StopReason::Stationary
            } else if current_residual <= params.residual_rtol * initial_residual {
                // no decrease left at rounding level on an already optimal point
                StopReason::Converged
            } else {
                StopReason::Stalled
            };
            break;
        };
        let previous = std::mem::replace(&mut point, next);
        adjoints = adjoints_at(problem, &point);
        let (g, grad_norm, residual) = diagnostics(problem, &point, &adjoints, a_max, params.direction);
        let weights: Vec<&SpaceTimeField> = point.densities.iter().map(|d| d.values()).collect();
        let bb = barzilai_borwein(&previous.controls, &point.controls, &grads, &g, &weights);
        drop(previous);
        grads = g;
        current_grad_norm = grad_norm;
        current_residual = residual;
        trace.entries.push(TraceEntry {
            iter,
            risk: point.risk,
            step,
            grad_norm,
            opt_residual: residual,
        });
        tau = match (params.step_rule, bb) {
            (StepRule::BarzilaiBorwein, Some(bb)) => bb.min(params.tau0),
            // grow only after a step that needed no backtracking
            _ if backtracks == 0 => (step / params.shrink).min(params.tau0),
            _ => step,
        };
        let n = trace.entries.len();
        if n > params.window {
            let before = trace.entries[n - 1 - params.window].risk.total;
            let decrease = (before - point.risk.total) / point.risk.total.abs().max(f64::MIN_POSITIVE);
            if decrease < params.rel_tol && residual <= params.residual_rtol * initial_residual {
                stop = StopReason::Converged;
                break;
            }
        }
    }

    let controls = point
        .controls
        .into_iter()
        .map(|c| ControlField::new(c, a_max))
        .collect::<Result<Vec<_>>>()?;
    Ok(GdmOutcome {
        controls,
        densities: point.densities,
        adjoints,
        trace,
        stop,
    })
}

/// `<s,s>/<s,y>` with `s` the control change and `y` the direction change,
/// in the density-weighted inner product; `None` when the curvature estimate
/// is not positive.
fn barzilai_borwein(
    before: &[SpaceTimeField],
    after: &[SpaceTimeField],
    dir_before: &[SpaceTimeField],
    dir_after: &[SpaceTimeField],
    density: &[&SpaceTimeField],
) -> Option<f64> {
    let (mut ss, mut sy) = (0.0, 0.0);
    for j in 0..before.len() {
        let it = before[j]
            .as_slice()
            .iter()
            .zip(after[j].as_slice())
            .zip(dir_before[j].as_slice().iter().zip(dir_after[j].as_slice()))
            .zip(density[j].as_slice());
        for (((a0, a1), (d0, d1)), m) in it {
            let s = a1 - a0;
            ss += m * s * s;
            sy += m * s * (d1 - d0);
        }
    }
    (sy > 0.0 && ss > 0.0).then(|| ss / sy)
}

/// Result of probing one crowd's unilateral deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdProbe {
    pub crowd: usize,
    pub own_risk: f64,
    /// Minimum over probes of `J_j(perturbed) - J_j(solution)`.
    pub min_delta: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub probes: usize,
    pub magnitude: f64,
    pub crowds: Vec<CrowdProbe>,
}

impl DeviationReport {
    pub fn passed(&self) -> bool {
        self.crowds.iter().all(|c| c.passed)
    }
}

/// Smooth random space-time field with sup norm `magnitude`: a sum of three
/// low-frequency travelling cosines with random phases.
fn random_perturbation(rng: &mut ChaCha8Rng, n_t: usize, grid: &TorusGrid, magnitude: f64) -> SpaceTimeField {
    let modes: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0..=4) as f64,
                rng.random_range(0..=3) as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.2..1.0),
            )
        })
        .collect();
    let length = grid.length();
    let mut w = SpaceTimeField::from_fn(n_t, grid.n_x(), |k, i| {
        let s = k as f64 / n_t as f64;
        let x = grid.node(i) / length;
        modes
            .iter()
            .map(|(kx, kt, phase, amp)| amp * (std::f64::consts::TAU * (kx * x + kt * s) + phase).cos())
            .sum()
    });
    let peak = w.max_abs();
    if peak > 0.0 {
        let scale = magnitude / peak;
        w.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    }
    w
}

/// Checks the equilibrium property of a pooled optimum: no crowd lowers its
/// own risk by perturbing only its own control. Probe `q` of crowd `j` uses
/// ChaCha stream `j * probes + q` of `seed`.
///
/// A crowd passes when every `J_j(perturbed) - J_j(solution)` is at least
/// `-(1e-6 |J_j| + residual_j * magnitude * sqrt(T))`, the second term bounding
/// the first-order change allowed by the solution's optimality residual.
pub fn deviation_probe(
    controls: &[ControlField],
    problem: &MultiCrowdProblem,
    probes: usize,
    magnitude: f64,
    seed: u64,
) -> Result<DeviationReport> {
    check_len("controls per crowd", problem.n_crowds(), controls.len())?;
    if !(magnitude.is_finite() && magnitude >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "probe magnitude must be nonnegative, got {magnitude}"
        )));
    }
    if !problem.kernel().is_symmetric() {
        return Err(Error::InvalidArgument(
            "deviation probes certify the game through lambda = lbar + lbar^T - diag(lbar), \
             which needs a symmetric kernel"
                .into(),
        ));
    }
    let (grid, time) = (problem.grid(), problem.time());
    for c in controls {
        check_len("control time slices", time.n_t(), c.n_slices())?;
        check_len("control width", grid.n_x(), c.values().n_x())?;
        time.check_cfl(grid, problem.dynamics(), c.a_max())?;
    }
    let raw: Vec<SpaceTimeField> = controls.iter().map(|c| c.values().clone()).collect();
    let point = evaluate(problem, raw, controls.iter().map(|c| c.a_max()).collect());
    let adjoints = adjoints_at(problem, &point);
    let lambda = problem.weights().lambda();
    let densities: Vec<&SpaceTimeField> = point.densities.iter().map(|d| d.values()).collect();

    let mut report = DeviationReport {
        probes,
        magnitude,
        crowds: Vec::new(),
    };
    for j in 0..problem.n_crowds() {
        let a_max = controls[j].a_max();
        let own = crowd_risk_unchecked(j, &point.controls[j], &densities, lambda, problem.cost_inputs()).total;
        let residual = crowd_residual(
            &point.controls[j],
            densities[j],
            adjoints[j].values(),
            a_max,
            grid,
            time,
        );
        let tolerance = 1e-6 * own.abs() + residual * magnitude * time.horizon().sqrt();
        let mut min_delta = f64::INFINITY;
        for q in 0..probes {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((j * probes + q) as u64);
            let w = random_perturbation(&mut rng, time.n_t(), grid, magnitude);
            let mut perturbed = point.controls[j].clone();
            for (v, dv) in perturbed.as_mut_slice().iter_mut().zip(w.as_slice()) {
                *v = clamp_control(*v + dv, a_max);
            }
            let m_j = solve_forward_unchecked(&problem.crowds()[j].m0, &perturbed, a_max, problem.dynamics(), grid, time);
            let mut mixed = densities.clone();
            mixed[j] = m_j.values();
            let risk = crowd_risk_unchecked(j, &perturbed, &mixed, lambda, problem.cost_inputs()).total;
            min_delta = min_delta.min(risk - own);
        }
        if probes == 0 {
            min_delta = 0.0;
        }
        report.crowds.push(CrowdProbe {
            crowd: j,
            own_risk: own,
            min_delta,
            tolerance,
            passed: min_delta >= -tolerance,
        });
    }
    Ok(report)
}
