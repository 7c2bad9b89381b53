use crate::error::{check_len, Error, Result};
use crate::forward::Dynamics;
use crate::grid::{check_density_slice, TimeGrid, TorusGrid};
use crate::kernel::AversionKernel;
use crate::risk::{AversionMatrices, CostInputs};

/// Initial density and terminal cost of one crowd, sampled on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Crowd {
    pub m0: Vec<f64>,
    pub psi: Vec<f64>,
}

/// Fully discretized multi-crowd control problem.
#[derive(Debug, Clone)]
pub struct MultiCrowdProblem {
    grid: TorusGrid,
    time: TimeGrid,
    dynamics: Dynamics,
    kernel: AversionKernel,
    aversion_weight: f64,
    crowds: Vec<Crowd>,
    psi: Vec<Vec<f64>>,
    weights: AversionMatrices,
}

impl MultiCrowdProblem {
    pub fn new(
        grid: TorusGrid,
        time: TimeGrid,
        dynamics: Dynamics,
        kernel: AversionKernel,
        aversion_weight: f64,
        crowds: Vec<Crowd>,
        weights: AversionMatrices,
    ) -> Result<Self> {
        if crowds.is_empty() {
            return Err(Error::InvalidArgument("at least one crowd is required".into()));
        }
        check_len("aversion matrix size", crowds.len(), weights.n_crowds())?;
        if !(aversion_weight.is_finite() && aversion_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "aversion weight C must be finite and nonnegative, got {aversion_weight}"
            )));
        }
        if !kernel.is_local() {
            check_len("kernel width", grid.n_x(), kernel.n_x())?;
            if crowds.len() > 1 && !kernel.is_symmetric() {
                return Err(Error::InvalidArgument(
                    "multi-crowd problems need a symmetric kernel: the game/control equivalence \
                     lambda = lbar + lbar^T - diag(lbar) only holds when phi(x) = phi(-x)"
                        .into(),
                ));
            }
        }
        for c in &crowds {
            check_density_slice(&c.m0, &grid)?;
            check_len("terminal cost", grid.n_x(), c.psi.len())?;
            if c.psi.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("terminal cost must be finite".into()));
            }
        }
        let psi = crowds.iter().map(|c| c.psi.clone()).collect();
        Ok(Self {
            grid,
            time,
            dynamics,
            kernel,
            aversion_weight,
            crowds,
            psi,
            weights,
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn kernel(&self) -> &AversionKernel {
        &self.kernel
    }

    pub fn aversion_weight(&self) -> f64 {
        self.aversion_weight
    }

    pub fn crowds(&self) -> &[Crowd] {
        &self.crowds
    }

    pub fn n_crowds(&self) -> usize {
        self.crowds.len()
    }

    pub fn psi(&self) -> &[Vec<f64>] {
        &self.psi
    }

    pub fn weights(&self) -> &AversionMatrices {
        &self.weights
    }

    pub fn cost_inputs(&self) -> CostInputs<'_> {
        CostInputs {
            psi: &self.psi,
            kernel: &self.kernel,
            aversion_weight: self.aversion_weight,
            grid: &self.grid,
            time: &self.time,
        }
    }

    /// Same problem with another kernel (e.g. the local arm of a comparison).
    pub fn with_kernel(&self, kernel: AversionKernel) -> Result<Self> {
        Self::new(
            self.grid,
            self.time,
            self.dynamics,
            kernel,
            self.aversion_weight,
            self.crowds.clone(),
            self.weights.clone(),
        )
    }
}
