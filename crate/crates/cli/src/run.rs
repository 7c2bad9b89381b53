//! Experiment runner: convexity gate, both optimization arms, particle
//! validation and artifact output.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use mfcrowd_core::grid::{l1_norm, selected_slices};
use mfcrowd_core::optimizer::{gdm_optimize, GdmOutcome, StopReason};
use mfcrowd_core::particles::{replicate_seed, ConvergenceRow, stream_particles, wasserstein2_to_density, EmpiricalCost, ParticleSetup};
use mfcrowd_core::{
    check_convexity, crowd_risk, crowding_term, AversionKernel, ConvexityVerdict, Crowd,
    MultiCrowdProblem, RiskBreakdown, SpaceTimeField, TorusGrid,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Arm, Experiment, RunConfig};
use crate::error::RunError;

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "MFCROWD_THREADS";

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Proceed even if a convexity gate fails.
    pub override_convexity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub verdict: String,
    /// Smallest eigenvalue of the symmetrized control weights (local arm).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_eigenvalue: Option<f64>,
    /// Smallest sampled quadratic form (nonlocal arm).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_form: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    pub overridden: bool,
}

impl ConvexityReport {
    fn new(verdict: &ConvexityVerdict, overridden: bool) -> Self {
        let mut report = Self {
            verdict: verdict.label().to_string(),
            min_eigenvalue: None,
            min_form: None,
            trials: None,
            overridden,
        };
        match verdict {
            ConvexityVerdict::CertifiedPsd { min_eigenvalue } => report.min_eigenvalue = Some(*min_eigenvalue),
            ConvexityVerdict::SampledOk { trials, min_form } => {
                report.min_form = Some(*min_form);
                report.trials = Some(*trials);
            }
            ConvexityVerdict::Violated(witness) => match witness {
                mfcrowd_core::risk::ConvexityWitness::Eigen { eigenvalue, .. } => {
                    report.min_eigenvalue = Some(*eigenvalue)
                }
                mfcrowd_core::risk::ConvexityWitness::DensityPair { trial, form, .. } => {
                    report.min_form = Some(*form);
                    report.trials = Some(trial + 1);
                }
            },
        }
        report
    }

    fn detail(&self) -> String {
        match (self.min_eigenvalue, self.min_form) {
            (Some(e), _) => format!("eigenvalue {e:e}"),
            (_, Some(f)) => format!("quadratic form {f:e} at trial {}", self.trials.unwrap_or(0)),
            _ => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    /// Pooled control objective at the last accepted iterate.
    pub risk: RiskBreakdown,
    /// Each crowd's own game risk.
    pub crowd_risks: Vec<RiskBreakdown>,
    pub iterations: usize,
    pub stop: StopReason,
    pub stalled: bool,
    /// Risk history never increases.
    pub monotone: bool,
    /// `(risk[n-1-w] - risk[n-1]) / |risk[n-1]|` over the last `w = 10`
    /// accepted iterates.
    pub final_relative_change: f64,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub residual_ratio: f64,
    /// `max_x m_j(T, x)` per crowd.
    pub peak_terminal_density: Vec<f64>,
}

/// Nonlocal minus local at the final time, on the total density.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub risk_nonlocal: f64,
    pub risk_local: f64,
    /// `J_local - J_nonlocal`; positive when the nonlocal arm is cheaper.
    pub risk_margin: f64,
    pub peak_nonlocal: f64,
    pub peak_local: f64,
    /// `max m_nonlocal(T) - max m_local(T)`.
    pub peak_margin: f64,
    /// `|G[m_nl](T) - m_loc(T)|_1`
    pub penalty_gap_l1: f64,
    /// `|m_nl(T) - m_loc(T)|_1`
    pub density_gap_l1: f64,
    /// `|m_loc(T)|_1`, the denominator of both relative gaps.
    pub local_terminal_l1: f64,
    pub penalty_gap_relative: f64,
    pub density_gap_relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderRow {
    pub n: usize,
    pub replicates: usize,
    /// Mean over replicates of `|mean_i empirical_risk - J|`.
    pub mean_risk_gap: f64,
    pub mean_w2_terminal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleSummary {
    /// Arm whose converged control drives the particles.
    pub arm: Arm,
    pub ladder: Vec<LadderRow>,
    pub risk_gap_monotone: bool,
    pub w2_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub convexity: BTreeMap<Arm, ConvexityReport>,
    pub arms: BTreeMap<Arm, ArmSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub particles: Option<ParticleSummary>,
    pub stalled: bool,
}

impl RunSummary {
    /// 0 on success, 2 if any arm stalled.
    pub fn exit_code(&self) -> i32 {
        if self.stalled {
            2
        } else {
            0
        }
    }

    /// Pretty JSON with lexicographically sorted keys.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("summary is serializable");
        serde_json::to_string_pretty(&value).expect("json value is serializable")
    }
}

/// Solved arm: its problem and optimizer outcome.
pub struct ArmRun {
    pub arm: Arm,
    pub problem: MultiCrowdProblem,
    pub outcome: GdmOutcome,
}

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    parse_thread_cap(std::env::var(THREADS_ENV).ok().as_deref())
}

fn parse_thread_cap(value: Option<&str>) -> Option<usize> {
    value.and_then(|v| v.trim().parse::<usize>().ok()).filter(|n| *n > 0)
}

/// Wall-clock seconds per phase; kept out of `summary.json` so that reruns
/// are byte-identical.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timings {
    pub optimization: f64,
    pub particles: f64,
}

/// Everything a run produced, for callers that inspect the solutions.
pub struct RunReport {
    pub summary: RunSummary,
    pub runs: Vec<ArmRun>,
    pub timings: Timings,
}

impl RunReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmRun> {
        self.runs.iter().find(|r| r.arm == arm)
    }
}

/// Runs the experiment and returns its summary.
pub fn run_experiment(experiment: &Experiment, out_dir: &Path, options: RunOptions) -> Result<RunSummary, RunError> {
    Ok(execute(experiment, out_dir, options)?.summary)
}

/// Runs the experiment inside a pool capped by [`THREADS_ENV`].
pub fn execute(experiment: &Experiment, out_dir: &Path, options: RunOptions) -> Result<RunReport, RunError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| RunError::Io(std::io::Error::other(e.to_string())))?;
    pool.install(|| run_in_pool(experiment, out_dir, options))
}

fn run_in_pool(experiment: &Experiment, out_dir: &Path, options: RunOptions) -> Result<RunReport, RunError> {
    let config = &experiment.config;
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("resolved_config.toml"),
        toml::to_string_pretty(config).map_err(|e| std::io::Error::other(e.to_string()))?,
    )?;
    write_initial(&experiment.crowds, &experiment.grid, &out_dir.join("initial.csv"))?;

    let arms = experiment.arms();
    let problems: Vec<(Arm, MultiCrowdProblem)> = arms
        .iter()
        .map(|arm| Ok((*arm, experiment.problem(*arm)?)))
        .collect::<Result<_, RunError>>()?;

    let mut convexity = BTreeMap::new();
    for (arm, problem) in &problems {
        let verdict = check_convexity(
            problem.weights().lambda_bar(),
            problem.kernel(),
            problem.grid(),
            config.convexity.trials,
            config.seed,
        )?;
        let report = ConvexityReport::new(&verdict, verdict.is_violated() && options.override_convexity);
        if verdict.is_violated() && !options.override_convexity {
            return Err(RunError::Convexity {
                arm: arm.name(),
                detail: report.detail(),
            });
        }
        if verdict.is_violated() {
            eprintln!("warning: convexity check failed for the {} arm; continuing", arm.name());
        }
        convexity.insert(*arm, report);
    }

    let mut timings = Timings::default();
    let clock = Instant::now();
    let runs: Vec<ArmRun> = problems
        .into_par_iter()
        .map(|(arm, problem)| {
            let outcome = gdm_optimize(&problem, &config.optimizer, None)?;
            Ok(ArmRun { arm, problem, outcome })
        })
        .collect::<Result<_, RunError>>()?;
    timings.optimization = clock.elapsed().as_secs_f64();

    let stride = experiment.output_stride();
    let mut arm_summaries = BTreeMap::new();
    for run in &runs {
        write_arm(run, &out_dir.join(run.arm.name()), stride)?;
        arm_summaries.insert(run.arm, summarize_arm(run, config.optimizer.window)?);
    }
    let stalled = runs.iter().any(|r| r.outcome.stalled());

    let nonlocal = runs.iter().find(|r| r.arm == Arm::Nonlocal);
    let local = runs.iter().find(|r| r.arm == Arm::Local);
    let comparison = match (nonlocal, local) {
        (Some(nl), Some(loc)) => {
            write_differences(nl, loc, &out_dir.join("differences.csv"), stride)?;
            Some(compare(nl, loc)?)
        }
        _ => None,
    };

    let particles = if !config.particles.enabled {
        None
    } else if experiment.crowds.len() != 1 {
        eprintln!("note: the particle study covers single-crowd runs only; skipped");
        None
    } else {
        let run = nonlocal.or(local).expect("at least one arm ran");
        let clock = Instant::now();
        let rows = particle_study(run, experiment)?;
        timings.particles = clock.elapsed().as_secs_f64();
        write_particles(&rows, &out_dir.join("particles.csv"))?;
        Some(summarize_particles(run.arm, &rows, &config.particles.sizes))
    };

    let summary = RunSummary {
        config: config.clone(),
        convexity,
        arms: arm_summaries,
        comparison,
        particles,
        stalled,
    };
    fs::write(out_dir.join("summary.json"), summary.to_json() + "\n")?;
    Ok(RunReport { summary, runs, timings })
}

fn field_file(dir: &Path, stem: &str, crowd: usize, n_crowds: usize) -> std::path::PathBuf {
    if n_crowds == 1 {
        dir.join(format!("{stem}.csv"))
    } else {
        dir.join(format!("{stem}_{crowd}.csv"))
    }
}

fn write_field(field: &SpaceTimeField, run: &ArmRun, path: &Path, stride: usize) -> std::io::Result<()> {
    let time = run.problem.time();
    let mut out = BufWriter::new(File::create(path)?);
    field.write_csv(run.problem.grid(), |k| time.time(k), stride, &mut out)?;
    out.flush()
}

/// `risk_history.csv` and the strided `m`, `a`, `p` fields of one arm.
pub fn write_arm(run: &ArmRun, dir: &Path, stride: usize) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut history = BufWriter::new(File::create(dir.join("risk_history.csv"))?);
    run.outcome.trace.write_csv(&mut history)?;
    history.flush()?;
    let n = run.problem.n_crowds();
    for j in 0..n {
        write_field(run.outcome.densities[j].values(), run, &field_file(dir, "m", j, n), stride)?;
        write_field(run.outcome.controls[j].values(), run, &field_file(dir, "a", j, n), stride)?;
        write_field(run.outcome.adjoints[j].values(), run, &field_file(dir, "p", j, n), stride)?;
    }
    Ok(())
}

fn summarize_arm(run: &ArmRun, window: usize) -> Result<ArmSummary, RunError> {
    let outcome = &run.outcome;
    let problem = &run.problem;
    let entries = &outcome.trace.entries;
    let first = entries.first().expect("trace has the initial point");
    let last = entries.last().expect("trace has the initial point");
    let back = entries.len().saturating_sub(window + 1);
    let final_relative_change = (entries[back].risk.total - last.risk.total) / last.risk.total.abs().max(f64::MIN_POSITIVE);
    let crowd_risks = (0..problem.n_crowds())
        .map(|j| {
            crowd_risk(
                j,
                &outcome.controls,
                &outcome.densities,
                problem.weights().lambda(),
                problem.cost_inputs(),
            )
        })
        .collect::<mfcrowd_core::Result<Vec<_>>>()?;
    Ok(ArmSummary {
        risk: last.risk,
        crowd_risks,
        iterations: outcome.iterations(),
        stop: outcome.stop,
        stalled: outcome.stalled(),
        monotone: outcome.trace.is_monotone(),
        final_relative_change,
        initial_residual: first.opt_residual,
        final_residual: last.opt_residual,
        residual_ratio: ratio(last.opt_residual, first.opt_residual),
        peak_terminal_density: outcome
            .densities
            .iter()
            .map(|m| m.terminal().iter().copied().fold(f64::MIN, f64::max))
            .collect(),
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Sum of all crowds' densities at time index `k`.
fn total_density(run: &ArmRun, k: usize) -> Vec<f64> {
    let mut total = vec![0.0; run.problem.grid().n_x()];
    for m in &run.outcome.densities {
        for (t, v) in total.iter_mut().zip(m.slice(k)) {
            *t += v;
        }
    }
    total
}

/// Crowding penalty felt in an arm: `G[m]` for a nonlocal kernel, `m` itself
/// in the local limit.
fn penalty(kernel: &AversionKernel, density: Vec<f64>, grid: &TorusGrid) -> mfcrowd_core::Result<Vec<f64>> {
    if kernel.is_local() {
        Ok(density)
    } else {
        crowding_term(kernel, &density, grid)
    }
}

fn compare(nl: &ArmRun, loc: &ArmRun) -> Result<Comparison, RunError> {
    let grid = nl.problem.grid();
    let last = nl.problem.time().n_t();
    let m_nl = total_density(nl, last);
    let m_loc = total_density(loc, last);
    let g_nl = penalty(nl.problem.kernel(), m_nl.clone(), grid)?;
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    let penalty_gap_l1 = l1_norm(&diff(&g_nl, &m_loc), grid);
    let density_gap_l1 = l1_norm(&diff(&m_nl, &m_loc), grid);
    let local_terminal_l1 = l1_norm(&m_loc, grid);
    let peak = |m: &[f64]| m.iter().copied().fold(f64::MIN, f64::max);
    let (risk_nonlocal, risk_local) = (nl.outcome.risk().total, loc.outcome.risk().total);
    let (peak_nonlocal, peak_local) = (peak(&m_nl), peak(&m_loc));
    Ok(Comparison {
        risk_nonlocal,
        risk_local,
        risk_margin: risk_local - risk_nonlocal,
        peak_nonlocal,
        peak_local,
        peak_margin: peak_nonlocal - peak_local,
        penalty_gap_l1,
        density_gap_l1,
        local_terminal_l1,
        penalty_gap_relative: ratio(penalty_gap_l1, local_terminal_l1),
        density_gap_relative: ratio(density_gap_l1, local_terminal_l1),
    })
}

/// `differences.csv`: nonlocal minus local penalty and density, per time and
/// node.
fn write_differences(nl: &ArmRun, loc: &ArmRun, path: &Path, stride: usize) -> Result<(), RunError> {
    let grid = nl.problem.grid();
    let time = nl.problem.time();
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "t,x,penalty_diff,density_diff")?;
    for k in selected_slices(time.n_t() + 1, stride) {
        let m_nl = total_density(nl, k);
        let m_loc = total_density(loc, k);
        let g_nl = penalty(nl.problem.kernel(), m_nl.clone(), grid)?;
        for i in 0..grid.n_x() {
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                time.time(k),
                grid.node(i),
                g_nl[i] - m_loc[i],
                m_nl[i] - m_loc[i]
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Empirical-versus-mean-field table for a single-crowd arm; every
/// `(N, replicate)` pair runs as its own task.
pub fn particle_study(run: &ArmRun, experiment: &Experiment) -> Result<Vec<ConvergenceRow>, RunError> {
    let problem = &run.problem;
    let control = &run.outcome.controls[0];
    let crowd = &problem.crowds()[0];
    let setup = ParticleSetup {
        control,
        m0: &crowd.m0,
        dynamics: problem.dynamics(),
        grid: problem.grid(),
        time: problem.time(),
    };
    let cost = EmpiricalCost {
        control,
        kernel: problem.kernel(),
        aversion_weight: problem.aversion_weight(),
        psi: &crowd.psi,
        grid: problem.grid(),
        time: problem.time(),
    };
    let mean_field_risk = run.outcome.risk().total;
    let terminal = run.outcome.densities[0].terminal();
    let params = &experiment.config.particles;
    let tasks: Vec<(usize, u64)> = params
        .sizes
        .iter()
        .flat_map(|&n| (0..params.replicates).map(move |s| (n, replicate_seed(experiment.config.seed, s))))
        .collect();
    let rows = tasks
        .into_par_iter()
        .map(|(n, seed)| {
            let streamed = stream_particles(n, setup, cost, seed, &[])?;
            let mean = streamed.mean_risk();
            Ok(ConvergenceRow {
                n,
                seed,
                mean_empirical_risk: mean,
                mean_field_risk,
                risk_gap: (mean - mean_field_risk).abs(),
                w2_terminal: wasserstein2_to_density(&streamed.terminal, terminal, problem.grid())?,
            })
        })
        .collect::<mfcrowd_core::Result<Vec<_>>>()?;
    Ok(rows)
}

/// Initial densities and terminal costs as `x,m0,psi` (one column pair per
/// crowd, suffixed `_j`, when there are several).
fn write_initial(crowds: &[Crowd], grid: &TorusGrid, path: &Path) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = String::from("x");
    for j in 0..crowds.len() {
        if crowds.len() == 1 {
            header.push_str(",m0,psi");
        } else {
            header.push_str(&format!(",m0_{j},psi_{j}"));
        }
    }
    writeln!(out, "{header}")?;
    for i in 0..grid.n_x() {
        write!(out, "{:.16e}", grid.node(i))?;
        for c in crowds {
            write!(out, ",{:.16e},{:.16e}", c.m0[i], c.psi[i])?;
        }
        writeln!(out)?;
    }
    out.flush()
}

fn write_particles(rows: &[ConvergenceRow], path: &Path) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "n,seed,mean_empirical_risk,mean_field_risk,risk_gap,w2_terminal")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.n, r.seed, r.mean_empirical_risk, r.mean_field_risk, r.risk_gap, r.w2_terminal
        )?;
    }
    out.flush()
}

/// Per-size averages in ladder order, with their monotonicity flags.
pub fn summarize_particles(arm: Arm, rows: &[ConvergenceRow], sizes: &[usize]) -> ParticleSummary {
    let ladder: Vec<LadderRow> = sizes
        .iter()
        .map(|&n| {
            let group: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.n == n).collect();
            let k = group.len().max(1) as f64;
            LadderRow {
                n,
                replicates: group.len(),
                mean_risk_gap: group.iter().map(|r| r.risk_gap).sum::<f64>() / k,
                mean_w2_terminal: group.iter().map(|r| r.w2_terminal).sum::<f64>() / k,
            }
        })
        .collect();
    let non_increasing = |f: fn(&LadderRow) -> f64| ladder.windows(2).all(|w| f(&w[1]) <= f(&w[0]));
    ParticleSummary {
        arm,
        risk_gap_monotone: non_increasing(|r| r.mean_risk_gap),
        w2_monotone: non_increasing(|r| r.mean_w2_terminal),
        ladder,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(n: usize, gap: f64, w2: f64) -> ConvergenceRow {
        ConvergenceRow {
            n,
            seed: 0,
            mean_empirical_risk: 0.0,
            mean_field_risk: 0.0,
            risk_gap: gap,
            w2_terminal: w2,
        }
    }

    #[test]
    fn ladder_averages_and_flags() {
        let rows = [row(10, 1.0, 0.5), row(10, 3.0, 0.3), row(40, 1.0, 0.2), row(40, 1.0, 0.9)];
        let s = summarize_particles(Arm::Nonlocal, &rows, &[10, 40]);
        assert_eq!(s.ladder[0].mean_risk_gap, 2.0);
        assert_eq!(s.ladder[1].mean_risk_gap, 1.0);
        assert!(s.risk_gap_monotone);
        assert!(!s.w2_monotone);
        assert_eq!(s.ladder[1].replicates, 2);
    }

    #[test]
    fn ratio_handles_zero() {
        assert_eq!(ratio(0.0, 0.0), 0.0);
        assert_eq!(ratio(1.0, 0.0), f64::INFINITY);
        assert_eq!(ratio(1.0, 4.0), 0.25);
    }

    #[test]
    fn thread_cap_parses_positive_integers() {
        assert_eq!(parse_thread_cap(Some(" 4")), Some(4));
        assert_eq!(parse_thread_cap(Some("0")), None);
        assert_eq!(parse_thread_cap(Some("x")), None);
        assert_eq!(parse_thread_cap(None), None);
    }
}
