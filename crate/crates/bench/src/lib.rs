//! Shared fixtures for the solver benchmarks.

use mfcrowd_core::profiles::builtin_crowd;
use mfcrowd_core::{
    AdjointInputs, AversionKernel, ControlField, Crowd, DMatrix, DensityField, Dynamics, KernelSpec,
    SpaceTimeField, TimeGrid, TorusGrid,
};

/// Reference crowd and kernel on an `n_x` grid with a smooth nonzero control.
pub struct Fixture {
    pub grid: TorusGrid,
    pub time: TimeGrid,
    pub dynamics: Dynamics,
    pub kernel: AversionKernel,
    pub crowd: Crowd,
    pub control: ControlField,
    pub density: DensityField,
    pub psi: Vec<Vec<f64>>,
    pub lambda_bar: DMatrix<f64>,
}

impl Fixture {
    pub fn new(n_x: usize, horizon: f64) -> Self {
        let a_max = 10.0;
        let grid = TorusGrid::unit(n_x).expect("valid grid");
        let dynamics = Dynamics::new(1.0).expect("valid sigma");
        let time = TimeGrid::smallest_pow2(horizon, &grid, &dynamics, a_max).expect("valid horizon");
        let kernel = KernelSpec::default().build(&grid).expect("valid kernel");
        let crowd = builtin_crowd("paper_fig1", &grid).expect("builtin profile");
        let values = SpaceTimeField::from_fn(time.n_t(), n_x, |k, i| {
            let phase = 2.0 * std::f64::consts::PI * (grid.node(i) + time.time(k));
            3.0 * phase.sin()
        });
        let control = ControlField::new(values, a_max).expect("control inside the box");
        let density = mfcrowd_core::solve_forward(&crowd.m0, &control, &dynamics, &grid, &time).expect("stable step");
        let psi = vec![crowd.psi.clone()];
        Self {
            grid,
            time,
            dynamics,
            kernel,
            crowd,
            control,
            density,
            psi,
            lambda_bar: DMatrix::identity(1, 1),
        }
    }

    pub fn adjoint_inputs(&self, aversion_weight: f64) -> AdjointInputs<'_> {
        AdjointInputs {
            psi: &self.psi,
            lambda_bar: &self.lambda_bar,
            kernel: &self.kernel,
            aversion_weight,
            dynamics: &self.dynamics,
            grid: &self.grid,
            time: &self.time,
        }
    }
}
