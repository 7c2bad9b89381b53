//! Backward costate solver.
//!
//! For each crowd `j` the costate solves, backward from `p_j(T) = psi_j`,
//!
//! ```text
//! -dp_j/dt = |a_j|^2 / 2 + C S_j + a_j dp_j/dx + (sigma^2/2) d2p_j/dx2
//! S_j      = sum_l ( lbar_jl G^T[m_l] + lbar_lj G[m_l] )
//! ```
//!
//! For symmetric kernels `S_j = [G[m]^T (Lbar + Lbar^T)]_j`; the transposed
//! convolution only matters for one-sided kernels. In local mode `G` is the
//! identity. Each backward step is exactly the transpose of the forward
//! step (central drift `a_j dp_j/dx` plus the physical and scheme diffusion),
//! so the resulting gradient is consistent with the discrete risk.

use nalgebra::DMatrix;

use crate::error::{check_len, Result};
use crate::forward::{transpose_step, Dynamics, StepCoefficients};
use crate::grid::{AdjointField, ControlField, DensityField, SpaceTimeField, TimeGrid, TorusGrid};
use crate::kernel::AversionKernel;

/// Crowding sources `S_j` for every crowd at one time level.
pub(crate) struct SourceWorkspace {
    direct: Vec<Vec<f64>>,
    transposed: Vec<Vec<f64>>,
}

impl SourceWorkspace {
    pub fn new(n_crowds: usize, n_x: usize) -> Self {
        Self {
            direct: vec![vec![0.0; n_x]; n_crowds],
            transposed: vec![vec![0.0; n_x]; n_crowds],
        }
    }

    /// Writes `S_j` into `out[j]` for the density slices `m[l]`.
    pub fn sources(
        &mut self,
        kernel: &AversionKernel,
        lambda_bar: &DMatrix<f64>,
        m: &[&[f64]],
        out: &mut [Vec<f64>],
    ) {
        let n_crowds = m.len();
        for l in 0..n_crowds {
            kernel.apply_into(m[l], &mut self.direct[l]);
            kernel.apply_transpose_into(m[l], &mut self.transposed[l]);
        }
        for (j, s) in out.iter_mut().enumerate().take(n_crowds) {
            s.fill(0.0);
            for l in 0..n_crowds {
                let (wt, wd) = (lambda_bar[(j, l)], lambda_bar[(l, j)]);
                if wt != 0.0 {
                    for (o, v) in s.iter_mut().zip(&self.transposed[l]) {
                        *o += wt * v;
                    }
                }
                if wd != 0.0 {
                    for (o, v) in s.iter_mut().zip(&self.direct[l]) {
                        *o += wd * v;
                    }
                }
            }
        }
    }
}

/// Everything the backward sweep needs besides the controls and densities.
#[derive(Debug, Clone, Copy)]
pub struct AdjointInputs<'a> {
    pub psi: &'a [Vec<f64>],
    pub lambda_bar: &'a DMatrix<f64>,
    pub kernel: &'a AversionKernel,
    /// Aversion weight `C`.
    pub aversion_weight: f64,
    pub dynamics: &'a Dynamics,
    pub grid: &'a TorusGrid,
    pub time: &'a TimeGrid,
}

/// Costates of all crowds.
pub fn solve_adjoint(
    controls: &[ControlField],
    densities: &[DensityField],
    inputs: AdjointInputs<'_>,
) -> Result<Vec<AdjointField>> {
    let n_crowds = controls.len();
    let AdjointInputs {
        psi,
        lambda_bar,
        kernel,
        grid,
        time,
        ..
    } = inputs;
    check_len("densities per crowd", n_crowds, densities.len())?;
    check_len("terminal costs per crowd", n_crowds, psi.len())?;
    check_len("lambda_bar rows", n_crowds, lambda_bar.nrows())?;
    check_len("lambda_bar cols", n_crowds, lambda_bar.ncols())?;
    if !kernel.is_local() {
        check_len("kernel width", grid.n_x(), kernel.n_x())?;
    }
    for j in 0..n_crowds {
        check_len("control time slices", time.n_t(), controls[j].n_slices())?;
        check_len("control width", grid.n_x(), controls[j].values().n_x())?;
        check_len("density time slices", time.n_t() + 1, densities[j].n_slices())?;
        check_len("density width", grid.n_x(), densities[j].values().n_x())?;
        check_len("terminal cost", grid.n_x(), psi[j].len())?;
        time.check_cfl(grid, inputs.dynamics, controls[j].a_max())?;
    }
    let a_max: Vec<f64> = controls.iter().map(|c| c.a_max()).collect();
    let controls: Vec<&SpaceTimeField> = controls.iter().map(|c| c.values()).collect();
    let densities: Vec<&SpaceTimeField> = densities.iter().map(|d| d.values()).collect();
    Ok(solve_adjoint_unchecked(&controls, &a_max, &densities, inputs))
}

/// `a_max[j]` is crowd `j`'s box bound, which sets its scheme diffusion.
pub(crate) fn solve_adjoint_unchecked(
    controls: &[&SpaceTimeField],
    a_max: &[f64],
    densities: &[&SpaceTimeField],
    inputs: AdjointInputs<'_>,
) -> Vec<AdjointField> {
    let AdjointInputs {
        psi,
        lambda_bar,
        kernel,
        aversion_weight,
        dynamics,
        grid,
        time,
    } = inputs;
    let n_crowds = controls.len();
    let n_x = grid.n_x();
    let n_t = time.n_t();
    let dt = time.dt();
    let coeffs: Vec<StepCoefficients> = a_max
        .iter()
        .map(|bound| StepCoefficients::new(grid, time, dynamics, *bound))
        .collect();

    let mut fields: Vec<SpaceTimeField> = (0..n_crowds)
        .map(|_| SpaceTimeField::zeros(n_t + 1, n_x))
        .collect();
    for (f, terminal) in fields.iter_mut().zip(psi) {
        f.slice_mut(n_t).copy_from_slice(terminal);
    }

    let mut workspace = SourceWorkspace::new(n_crowds, n_x);
    let mut sources = vec![vec![0.0; n_x]; n_crowds];
    let with_aversion = aversion_weight != 0.0;
    for k in (0..n_t).rev() {
        if with_aversion {
            let m: Vec<&[f64]> = densities.iter().map(|d| d.slice(k)).collect();
            workspace.sources(kernel, lambda_bar, &m, &mut sources);
        }
        for j in 0..n_crowds {
            let a = controls[j].slice(k);
            let data = fields[j].as_mut_slice();
            let (now, next) = data.split_at_mut((k + 1) * n_x);
            let now = &mut now[k * n_x..];
            transpose_step(&next[..n_x], a, coeffs[j], now);
            let s = &sources[j];
            for i in 0..n_x {
                let running = 0.5 * a[i] * a[i]
                    + if with_aversion {
                        aversion_weight * s[i]
                    } else {
                        0.0
                    };
                now[i] += dt * running;
            }
        }
    }
    fields.into_iter().map(AdjointField::new_unchecked).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::solve_forward;
    use crate::kernel::KernelSpec;

    struct Setup {
        grid: TorusGrid,
        time: TimeGrid,
        dynamics: Dynamics,
    }

    fn setup(n_x: usize, horizon: f64, a_max: f64) -> Setup {
        let grid = TorusGrid::unit(n_x).unwrap();
        let dynamics = Dynamics::new(1.0).unwrap();
        let time = TimeGrid::smallest_pow2(horizon, &grid, &dynamics, a_max).unwrap();
        Setup {
            grid,
            time,
            dynamics,
        }
    }

    fn run(
        s: &Setup,
        control: &ControlField,
        m0: &[f64],
        psi: Vec<f64>,
        kernel: &AversionKernel,
        c: f64,
    ) -> AdjointField {
        let m = solve_forward(m0, control, &s.dynamics, &s.grid, &s.time).unwrap();
        let lbar = DMatrix::from_element(1, 1, 1.0);
        let psi = vec![psi];
        let mut out = solve_adjoint(
            std::slice::from_ref(control),
            &[m],
            AdjointInputs {
                psi: &psi,
                lambda_bar: &lbar,
                kernel,
                aversion_weight: c,
                dynamics: &s.dynamics,
                grid: &s.grid,
                time: &s.time,
            },
        )
        .unwrap();
        out.remove(0)
    }

    fn smooth(grid: &TorusGrid, f: impl Fn(f64) -> f64) -> Vec<f64> {
        grid.nodes().into_iter().map(f).collect()
    }

    #[test]
    fn zero_problem_has_zero_costate() {
        let s = setup(32, 0.05, 1.0);
        let a = ControlField::zeros(&s.time, &s.grid, 1.0).unwrap();
        let k = KernelSpec::default().build(&s.grid).unwrap();
        let p = run(&s, &a, &[1.0; 32], vec![0.0; 32], &k, 0.0);
        assert_eq!(p.values().max_abs(), 0.0);
    }

    #[test]
    fn constant_terminal_cost_is_preserved() {
        let s = setup(32, 0.05, 1.0);
        let a = ControlField::zeros(&s.time, &s.grid, 1.0).unwrap();
        let k = KernelSpec::default().build(&s.grid).unwrap();
        let p = run(&s, &a, &[1.0; 32], vec![2.5; 32], &k, 0.0);
        assert!(p.values().as_slice().iter().all(|v| (v - 2.5).abs() < 1e-13));
    }

    #[test]
    fn terminal_condition_is_exact_and_max_principle_holds() {
        let s = setup(64, 0.1, 1.0);
        let psi = smooth(&s.grid, |x| (6.0 * x).sin() * 3.0 + (x * 17.0).cos());
        let a = ControlField::zeros(&s.time, &s.grid, 1.0).unwrap();
        let k = AversionKernel::local(&s.grid);
        let p = run(&s, &a, &[1.0; 64], psi.clone(), &k, 0.0);
        assert_eq!(p.terminal(), psi.as_slice());
        let bound = psi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(p.values().max_abs() <= bound);
    }

    #[test]
    fn single_crowd_source_doubles_symmetric_crowding() {
        let s = setup(32, 0.02, 1.0);
        let kernel = KernelSpec {
            support_lo: -0.1,
            support_hi: 0.1,
            ..KernelSpec::default()
        }
        .build(&s.grid)
        .unwrap();
        assert!(kernel.is_symmetric());
        let m: Vec<f64> = smooth(&s.grid, |x| 1.0 + 0.6 * (2.0 * std::f64::consts::PI * x).cos());
        let lbar = DMatrix::from_element(1, 1, 1.0);
        let mut ws = SourceWorkspace::new(1, 32);
        let mut out = vec![vec![0.0; 32]];
        ws.sources(&kernel, &lbar, &[&m], &mut out);
        let g = crate::kernel::crowding_term(&kernel, &m, &s.grid).unwrap();
        for (o, gi) in out[0].iter().zip(&g) {
            assert!((o - 2.0 * gi).abs() < 1e-12);
        }
        // local mode: 2 m
        let local = AversionKernel::local(&s.grid);
        ws.sources(&local, &lbar, &[&m], &mut out);
        for (o, mi) in out[0].iter().zip(&m) {
            assert!((o - 2.0 * mi).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_state_costate_accumulates_running_cost() {
        // a = 0, m uniform, unit-mass kernel: p(t) = psi + 2 C (T - t)
        let s = setup(32, 0.05, 1.0);
        let a = ControlField::zeros(&s.time, &s.grid, 1.0).unwrap();
        let k = KernelSpec::default().build(&s.grid).unwrap();
        let p = run(&s, &a, &[1.0; 32], vec![0.0; 32], &k, 3.0);
        let t0 = s.time.horizon();
        assert!(p.slice(0).iter().all(|v| (v - 6.0 * t0).abs() < 1e-11));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let s = setup(16, 0.05, 1.0);
        let a = ControlField::zeros(&s.time, &s.grid, 1.0).unwrap();
        let m = solve_forward(&[1.0; 16], &a, &s.dynamics, &s.grid, &s.time).unwrap();
        let k = AversionKernel::local(&s.grid);
        let lbar = DMatrix::from_element(1, 1, 1.0);
        let psi = vec![vec![0.0; 15]];
        let r = solve_adjoint(
            std::slice::from_ref(&a),
            &[m],
            AdjointInputs {
                psi: &psi,
                lambda_bar: &lbar,
                kernel: &k,
                aversion_weight: 1.0,
                dynamics: &s.dynamics,
                grid: &s.grid,
                time: &s.time,
            },
        );
        assert!(r.is_err());
    }
}
