//! Acceptance checks: one PASS/FAIL line per criterion. The criteria that
//! concern the reference experiment share a single run of the bundled
//! configuration; its artifacts are left in the cargo target tmp directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use mfcrowd_cli::{execute, parse_config, Arm, RunOptions, RunReport};
use mfcrowd_core::forward::scheme_speed;
use mfcrowd_core::optimizer::{control_gradient, gdm_optimize, GdmParams};
use mfcrowd_core::profiles::{gaussian_well, wrapped_gaussian};
use mfcrowd_core::risk::random_smooth_density;
use mfcrowd_core::{
    check_convexity, deviation_probe, integrate, pooled_risk, reconstruct_lambda, solve_adjoint, solve_forward,
    symmetrize_lambda, wasserstein2_circle, AdjointInputs, AversionKernel, AversionMatrices, ControlField,
    ConvexityVerdict, Crowd, DMatrix, DensityField, Dynamics, KernelSpec, MultiCrowdProblem, SpaceTimeField,
    TimeGrid, TorusGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn failed(detail: impl std::fmt::Display) -> Verdict {
    verdict(false, format!("error: {detail}"))
}

/// Smooth random field: a few low-frequency travelling cosines.
fn smooth_field(rng: &mut ChaCha8Rng, n_t: usize, grid: &TorusGrid, amplitude: f64) -> SpaceTimeField {
    let modes: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0..=3) as f64,
                rng.random_range(0..=2) as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.1..1.0),
            )
        })
        .collect();
    let total: f64 = modes.iter().map(|m| m.3).sum();
    SpaceTimeField::from_fn(n_t, grid.n_x(), |k, i| {
        let s = k as f64 / n_t as f64;
        let x = grid.node(i);
        amplitude / total
            * modes
                .iter()
                .map(|(kx, kt, ph, amp)| amp * (std::f64::consts::TAU * (kx * x + kt * s) + ph).cos())
                .sum::<f64>()
    })
}

fn read_history(path: &Path) -> Result<Vec<(f64, f64)>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty history")?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("no column {name}"));
    let (risk, residual) = (col("risk_total")?, col("opt_residual")?);
    lines
        .map(|l| {
            let fields: Vec<&str> = l.split(',').collect();
            let parse = |i: usize| fields[i].parse::<f64>().map_err(|e| e.to_string());
            Ok((parse(risk)?, parse(residual)?))
        })
        .collect()
}

fn conservation(report: &RunReport) -> Verdict {
    let Some(run) = report.arm(Arm::Nonlocal) else {
        return failed("no nonlocal arm");
    };
    let grid = run.problem.grid();
    let m = &run.outcome.densities[0];
    let (mut worst_mass, mut min_value) = (0.0f64, f64::INFINITY);
    for slice in m.values().slices() {
        worst_mass = worst_mass.max((integrate(slice, grid).unwrap() - 1.0).abs());
        min_value = slice.iter().copied().fold(min_value, f64::min);
    }
    let clock = Instant::now();
    let resolved = solve_forward(
        &run.problem.crowds()[0].m0,
        &run.outcome.controls[0],
        run.problem.dynamics(),
        grid,
        run.problem.time(),
    );
    let seconds = clock.elapsed().as_secs_f64();
    let same = resolved.map(|r| r.values() == m.values()).unwrap_or(false);
    verdict(
        worst_mass <= 1e-10 && min_value >= 0.0 && seconds < 30.0 && same,
        format!(
            "{} slices, max |mass - 1| = {worst_mass:.2e}, min m = {min_value:.2e}, forward solve {seconds:.2} s",
            m.n_slices()
        ),
    )
}

fn gradient_check() -> Verdict {
    let clock = Instant::now();
    let grid = TorusGrid::unit(64).unwrap();
    let dynamics = Dynamics::new(1.0).unwrap();
    let a_max = 10.0;
    let time = TimeGrid::smallest_pow2(1.0, &grid, &dynamics, a_max).unwrap();
    let kernel = KernelSpec::default().build(&grid).unwrap();
    let lambda_bar = DMatrix::identity(1, 1);
    let mut worst = 0.0f64;
    let mut checks = 0;
    for (instance, c) in [0.0, 50.0].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + instance as u64);
        let m0 = random_smooth_density(&mut rng, &grid);
        let bump = random_smooth_density(&mut rng, &grid);
        let peak = bump.iter().copied().fold(0.0, f64::max);
        let psi = vec![bump.iter().map(|v| 2.0 * (1.0 - v / peak)).collect::<Vec<f64>>()];
        let control = ControlField::new(smooth_field(&mut rng, time.n_t(), &grid, 3.0), a_max).unwrap();
        let risk_at = |a: &ControlField| {
            let m = solve_forward(&m0, a, &dynamics, &grid, &time).unwrap();
            let inputs = mfcrowd_core::risk::CostInputs {
                psi: &psi,
                kernel: &kernel,
                aversion_weight: c,
                grid: &grid,
                time: &time,
            };
            pooled_risk(std::slice::from_ref(a), &[m], &lambda_bar, inputs).unwrap().total
        };
        let m = solve_forward(&m0, &control, &dynamics, &grid, &time).unwrap();
        let inputs = AdjointInputs {
            psi: &psi,
            lambda_bar: &lambda_bar,
            kernel: &kernel,
            aversion_weight: c,
            dynamics: &dynamics,
            grid: &grid,
            time: &time,
        };
        let p = solve_adjoint(std::slice::from_ref(&control), std::slice::from_ref(&m), inputs)
            .unwrap()
            .remove(0);
        let g = control_gradient(&control, &m, &p, &grid, &time).unwrap();
        for _ in 0..5 {
            let w = smooth_field(&mut rng, time.n_t(), &grid, 1.0);
            let analytic: f64 =
                g.as_slice().iter().zip(w.as_slice()).map(|(x, y)| x * y).sum::<f64>() * grid.h() * time.dt();
            let eps = 1e-4;
            let shifted = |s: f64| {
                let f = SpaceTimeField::from_fn(time.n_t(), grid.n_x(), |k, i| control.slice(k)[i] + s * w.slice(k)[i]);
                ControlField::new(f, a_max).unwrap()
            };
            let fd = (risk_at(&shifted(eps)) - risk_at(&shifted(-eps))) / (2.0 * eps);
            worst = worst.max((fd - analytic).abs() / analytic.abs().max(1e-12));
            checks += 1;
        }
    }
    let seconds = clock.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-3 && seconds < 60.0,
        format!("{checks} directions, worst relative error {worst:.2e}, {seconds:.1} s"),
    )
}

fn monotone_histories(out: &Path) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for arm in ["nonlocal", "local"] {
        let history = match read_history(&out.join(arm).join("risk_history.csv")) {
            Ok(h) => h,
            Err(e) => return failed(e),
        };
        let monotone = history.windows(2).all(|w| w[1].0 <= w[0].0);
        let n = history.len();
        let last = history[n - 1].0;
        let tail = history[n.saturating_sub(10)..]
            .iter()
            .map(|(r, _)| (r - last).abs() / last.abs())
            .fold(0.0, f64::max);
        ok &= monotone && n >= 10 && tail < 1e-5;
        notes.push(format!("{arm}: {n} iterates, monotone {monotone}, last-10 change {tail:.2e}"));
    }
    verdict(ok, notes.join("; "))
}

fn ordering(summary: &Value) -> Verdict {
    let c = &summary["comparison"];
    let (risk, peak) = (c["risk_margin"].as_f64(), c["peak_margin"].as_f64());
    match (risk, peak) {
        (Some(r), Some(p)) => verdict(
            r > 0.0 && p > 0.0,
            format!(
                "J_nl = {:.4} < J_loc = {:.4} (margin {r:.4}); peak m_nl(T) = {:.4} > {:.4} (margin {p:.4})",
                c["risk_nonlocal"].as_f64().unwrap_or(f64::NAN),
                c["risk_local"].as_f64().unwrap_or(f64::NAN),
                c["peak_nonlocal"].as_f64().unwrap_or(f64::NAN),
                c["peak_local"].as_f64().unwrap_or(f64::NAN),
            ),
        ),
        _ => failed("summary.json lacks the comparison block"),
    }
}

fn crowding_parity(summary: &Value) -> Verdict {
    let c = &summary["comparison"];
    match (c["penalty_gap_relative"].as_f64(), c["density_gap_relative"].as_f64()) {
        (Some(p), Some(d)) => verdict(p < d, format!("penalty gap {p:.4} < density gap {d:.4} (relative L1 at T)")),
        _ => failed("summary.json lacks the comparison block"),
    }
}

fn residuals(out: &Path) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for arm in ["nonlocal", "local"] {
        let history = match read_history(&out.join(arm).join("risk_history.csv")) {
            Ok(h) => h,
            Err(e) => return failed(e),
        };
        let ratio = history.last().unwrap().1 / history[0].1;
        ok &= ratio <= 1e-2;
        notes.push(format!("{arm}: {:.3e} / {:.3e} = {ratio:.2e}", history.last().unwrap().1, history[0].1));
    }
    verdict(ok, notes.join("; "))
}

fn game_equivalence() -> Verdict {
    let grid = TorusGrid::unit(32).unwrap();
    let dynamics = Dynamics::new(1.0).unwrap();
    let params = GdmParams {
        max_iters: 300,
        ..GdmParams::default()
    };
    let time = TimeGrid::smallest_pow2(0.2, &grid, &dynamics, params.a_max).unwrap();
    let kernel = KernelSpec {
        support_lo: -0.1,
        support_hi: 0.1,
        ..KernelSpec::default()
    }
    .build(&grid)
    .unwrap();
    let lambda = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
    let weights = AversionMatrices::from_lambda(lambda.clone()).unwrap();
    let exact = reconstruct_lambda(weights.lambda_bar()) == lambda;
    let crowds = vec![
        Crowd {
            m0: wrapped_gaussian(0.0, 0.1, &grid).unwrap(),
            psi: gaussian_well(0.5, 0.1, 2.0, &grid),
        },
        Crowd {
            m0: wrapped_gaussian(0.5, 0.1, &grid).unwrap(),
            psi: gaussian_well(0.0, 0.1, 2.0, &grid),
        },
    ];
    let problem = match MultiCrowdProblem::new(grid, time, dynamics, kernel.clone(), 5.0, crowds, weights) {
        Ok(p) => p,
        Err(e) => return failed(e),
    };
    let solved = match gdm_optimize(&problem, &params, None) {
        Ok(s) => s,
        Err(e) => return failed(e),
    };
    let report = match deviation_probe(&solved.controls, &problem, 20, 1e-2, 11) {
        Ok(r) => r,
        Err(e) => return failed(e),
    };
    let probes: Vec<String> = report
        .crowds
        .iter()
        .map(|c| format!("crowd {}: min dJ {:.2e} vs tol {:.2e}", c.crowd, c.min_delta, c.tolerance))
        .collect();
    verdict(
        report.passed() && exact && kernel.is_symmetric(),
        format!(
            "{} ({:?} after {} iterations); lambda reconstruction exact: {exact}",
            probes.join(", "),
            solved.stop,
            solved.iterations()
        ),
    )
}

fn convexity_gates(summary: &Value) -> Verdict {
    let grid = TorusGrid::unit(16).unwrap();
    let local = AversionKernel::local(&grid);
    let identity = check_convexity(&DMatrix::identity(2, 2), &local, &grid, 1, 0).unwrap();
    let counter = symmetrize_lambda(&DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0])).unwrap();
    let rejected = check_convexity(&counter, &local, &grid, 1, 0).unwrap();
    let sampled = &summary["convexity"]["nonlocal"];
    let accepts = matches!(identity, ConvexityVerdict::CertifiedPsd { .. });
    let sampled_ok = sampled["verdict"] == "sampled_ok" && sampled["trials"] == 100;
    verdict(
        accepts && rejected.is_violated() && sampled_ok,
        format!(
            "identity {}, [[1,3],[3,1]] {}, reference kernel {} over {} trials (min form {:.2e})",
            identity.label(),
            rejected.label(),
            sampled["verdict"].as_str().unwrap_or("?"),
            sampled["trials"],
            sampled["min_form"].as_f64().unwrap_or(f64::NAN)
        ),
    )
}

fn mean_field_convergence(summary: &Value, particle_seconds: f64) -> Verdict {
    let p = &summary["particles"];
    let Some(ladder) = p["ladder"].as_array() else {
        return failed("summary.json lacks the particle table");
    };
    let rows: Vec<String> = ladder
        .iter()
        .map(|r| {
            format!(
                "N={} gap {:.4} W2 {:.4}",
                r["n"],
                r["mean_risk_gap"].as_f64().unwrap_or(f64::NAN),
                r["mean_w2_terminal"].as_f64().unwrap_or(f64::NAN)
            )
        })
        .collect();
    let sizes: Vec<u64> = ladder.iter().filter_map(|r| r["n"].as_u64()).collect();
    let replicates_ok = ladder.iter().all(|r| r["replicates"] == 10);
    verdict(
        p["risk_gap_monotone"] == true
            && p["w2_monotone"] == true
            && sizes == [100, 400, 1600]
            && replicates_ok
            && particle_seconds < 120.0,
        format!("{}; {particle_seconds:.1} s", rows.join(", ")),
    )
}

fn small_oracles() -> Verdict {
    // one forward step against the flux-form transfer matrix
    let grid = TorusGrid::unit(32).unwrap();
    let dynamics = Dynamics::new(0.3).unwrap();
    let a_max = 10.0;
    let dt = mfcrowd_core::cfl_max_dt(&grid, &dynamics, a_max);
    let time = TimeGrid::new(dt, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a: Vec<f64> = (0..32).map(|_| rng.random_range(-a_max..a_max)).collect();
    let m0 = random_smooth_density(&mut rng, &grid);
    let control = ControlField::new(SpaceTimeField::from_vec(1, 32, a.clone()).unwrap(), a_max).unwrap();
    let stepped = solve_forward(&m0, &control, &dynamics, &grid, &time).unwrap();
    let (h, n) = (grid.h(), 32);
    let alpha = scheme_speed(&grid, &dynamics, a_max);
    let d = dynamics.diffusivity();
    // flux across face i+1/2 as a row vector acting on m
    let mut matrix = vec![vec![0.0; n]; n];
    for face in 0..n {
        let (l, r) = (face, (face + 1) % n);
        let mut flux = vec![0.0; n];
        flux[l] += 0.5 * a[l] + 0.5 * alpha + d / h;
        flux[r] += 0.5 * a[r] - 0.5 * alpha - d / h;
        for j in 0..n {
            matrix[l][j] -= dt / h * flux[j];
            matrix[r][j] += dt / h * flux[j];
        }
    }
    let mut forward_err = 0.0f64;
    for i in 0..n {
        let expected = m0[i] + (0..n).map(|j| matrix[i][j] * m0[j]).sum::<f64>();
        forward_err = forward_err.max((expected - stepped.slice(1)[i]).abs());
    }

    // risk against a triple loop
    let grid16 = TorusGrid::unit(16).unwrap();
    let time16 = TimeGrid::new(0.01, 6).unwrap();
    let kernel = KernelSpec::default().build(&grid16).unwrap();
    let lambda_bar = symmetrize_lambda(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0])).unwrap();
    let controls: Vec<ControlField> = (0..2)
        .map(|_| {
            let f = SpaceTimeField::from_fn(6, 16, |_, _| rng.random_range(-3.0..3.0));
            ControlField::new(f, 3.0).unwrap()
        })
        .collect();
    let densities: Vec<DensityField> = (0..2)
        .map(|_| {
            let slices: Vec<f64> = (0..7).flat_map(|_| random_smooth_density(&mut rng, &grid16)).collect();
            DensityField::new(SpaceTimeField::from_vec(7, 16, slices).unwrap(), &grid16).unwrap()
        })
        .collect();
    let psi: Vec<Vec<f64>> = (0..2).map(|_| (0..16).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
    let c = 7.0;
    let inputs = mfcrowd_core::risk::CostInputs {
        psi: &psi,
        kernel: &kernel,
        aversion_weight: c,
        grid: &grid16,
        time: &time16,
    };
    let risk = pooled_risk(&controls, &densities, &lambda_bar, inputs).unwrap().total;
    let (h16, dt16) = (grid16.h(), time16.dt());
    let w = kernel.weights();
    let mut oracle = 0.0;
    for k in 0..6 {
        for j in 0..2 {
            for i in 0..16 {
                oracle += 0.5 * controls[j].slice(k)[i].powi(2) * densities[j].slice(k)[i] * dt16 * h16;
            }
        }
        for j in 0..2 {
            for l in 0..2 {
                for i in 0..16 {
                    for q in 0..16 {
                        oracle += c
                            * lambda_bar[(j, l)]
                            * h16
                            * w[(i + 16 - q) % 16]
                            * densities[j].slice(k)[q]
                            * densities[l].slice(k)[i]
                            * dt16
                            * h16;
                    }
                }
            }
        }
    }
    for j in 0..2 {
        for i in 0..16 {
            oracle += psi[j][i] * densities[j].slice(6)[i] * h16;
        }
    }
    let risk_err = (risk - oracle).abs() / oracle.abs();

    // single atoms: W2 is the geodesic distance
    let pairs = [(0.1, 0.4), (0.05, 0.95), (0.0, 0.5), (0.3, 0.3), (0.99, 0.01), (0.25, 0.8)];
    let atoms_exact = pairs.iter().all(|&(x, y)| {
        let geodesic = grid.distance(x, y);
        wasserstein2_circle(&[x], &[y], 1.0).unwrap() == geodesic
    });
    verdict(
        forward_err <= 1e-13 && risk_err <= 1e-13 && atoms_exact,
        format!("forward step error {forward_err:.1e}, risk relative error {risk_err:.1e}, single atoms exact {atoms_exact}"),
    )
}

fn main() -> ExitCode {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/paper_sec5.toml");
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_run");
    let _ = fs::remove_dir_all(&out);
    let mut experiment = parse_config(&config).expect("bundled configuration parses");
    experiment.config.particles.enabled = true;

    let clock = Instant::now();
    let report = execute(&experiment, &out, RunOptions::default()).expect("reference run completes");
    println!(
        "reference run: {:.1} s (optimization {:.1} s, particles {:.1} s), artifacts in {}",
        clock.elapsed().as_secs_f64(),
        report.timings.optimization,
        report.timings.particles,
        out.display()
    );
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).expect("summary written")).expect("valid json");

    let results = [
        ("conservation and positivity", conservation(&report)),
        ("adjoint gradient vs finite differences", gradient_check()),
        ("monotone risk histories", monotone_histories(&out)),
        ("nonlocal beats local, denser terminal peak", ordering(&summary)),
        ("crowding parity at the final time", crowding_parity(&summary)),
        ("maximum-principle residual", residuals(&out)),
        ("game equivalence", game_equivalence()),
        ("convexity gates", convexity_gates(&summary)),
        ("mean-field convergence of particles", mean_field_convergence(&summary, report.timings.particles)),
        ("small-instance oracles", small_oracles()),
    ];
    let mut all = true;
    for (i, (name, v)) in results.iter().enumerate() {
        all &= v.passed;
        println!(
            "criterion {:>2} [{}] {name}: {}",
            i + 1,
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
