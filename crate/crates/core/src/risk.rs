//! Risk functionals, the Hamiltonian integrand, the game/control weight
//! matrices and the convexity gates.
//!
//! All time integrals use the left-endpoint rule over control slices
//! `k = 0..n_t`; the terminal cost is integrated against the last density
//! slice.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grid::{ControlField, DensityField, SpaceTimeField, TimeGrid, TorusGrid};
use crate::kernel::AversionKernel;

/// Game weights `Lambda` and control weights `Lambda_bar`, linked by
/// `Lambda = Lambda_bar + Lambda_bar^T - diag(Lambda_bar)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AversionMatrices {
    lambda: DMatrix<f64>,
    lambda_bar: DMatrix<f64>,
}

impl AversionMatrices {
    /// From symmetric, nonnegative game weights; `Lambda_bar` is the
    /// upper-triangular solution returned by [`symmetrize_lambda`].
    pub fn from_lambda(lambda: DMatrix<f64>) -> Result<Self> {
        check_nonnegative(&lambda)?;
        let lambda_bar = symmetrize_lambda(&lambda)?;
        Ok(Self { lambda, lambda_bar })
    }

    /// From control weights alone; the game weights follow from the identity.
    pub fn from_lambda_bar(lambda_bar: DMatrix<f64>) -> Result<Self> {
        check_square(&lambda_bar)?;
        let lambda = reconstruct_lambda(&lambda_bar);
        check_nonnegative(&lambda)?;
        Ok(Self { lambda, lambda_bar })
    }

    /// Both matrices given explicitly; they must satisfy the identity.
    pub fn new(lambda: DMatrix<f64>, lambda_bar: DMatrix<f64>) -> Result<Self> {
        check_square(&lambda)?;
        check_nonnegative(&lambda)?;
        check_len("lambda_bar size", lambda.nrows(), lambda_bar.nrows())?;
        check_square(&lambda_bar)?;
        let rebuilt = reconstruct_lambda(&lambda_bar);
        let scale = lambda.amax().max(1.0);
        if (rebuilt - &lambda).amax() > 1e-12 * scale {
            return Err(Error::InvalidArgument(
                "lambda and lambda_bar violate lambda = lbar + lbar^T - diag(lbar)".into(),
            ));
        }
        Ok(Self { lambda, lambda_bar })
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn lambda_bar(&self) -> &DMatrix<f64> {
        &self.lambda_bar
    }

    pub fn n_crowds(&self) -> usize {
        self.lambda.nrows()
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "aversion matrix must be square and nonempty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "aversion matrix entries must be finite".into(),
        ));
    }
    Ok(())
}

fn check_nonnegative(m: &DMatrix<f64>) -> Result<()> {
    check_square(m)?;
    if m.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidArgument(
            "aversion weights lambda_jk must be nonnegative".into(),
        ));
    }
    Ok(())
}

/// `Lambda_bar + Lambda_bar^T - diag(Lambda_bar)`.
pub fn reconstruct_lambda(lambda_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = lambda_bar + lambda_bar.transpose();
    for j in 0..out.nrows() {
        out[(j, j)] -= lambda_bar[(j, j)];
    }
    out
}

/// Upper-triangular control weights for symmetric game weights: diagonal and
/// upper entries copied, lower entries zero.
pub fn symmetrize_lambda(lambda: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(lambda)?;
    let n = lambda.nrows();
    for j in 0..n {
        for k in (j + 1)..n {
            if lambda[(j, k)] != lambda[(k, j)] {
                return Err(Error::InvalidArgument(format!(
                    "the aversion between crowds must be symmetric: lambda[{j}][{k}] = {} but lambda[{k}][{j}] = {}",
                    lambda[(j, k)],
                    lambda[(k, j)]
                )));
            }
        }
    }
    Ok(DMatrix::from_fn(n, n, |j, k| {
        if k >= j {
            lambda[(j, k)]
        } else {
            0.0
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RiskBreakdown {
    pub energy: f64,
    pub aversion: f64,
    pub terminal: f64,
    pub total: f64,
}

impl RiskBreakdown {
    pub fn new(energy: f64, aversion: f64, terminal: f64) -> Self {
        Self {
            energy,
            aversion,
            terminal,
            total: energy + aversion + terminal,
        }
    }
}

/// Cost data shared by the risk evaluators.
#[derive(Debug, Clone, Copy)]
pub struct CostInputs<'a> {
    /// Terminal cost per crowd.
    pub psi: &'a [Vec<f64>],
    pub kernel: &'a AversionKernel,
    /// Aversion weight `C`.
    pub aversion_weight: f64,
    pub grid: &'a TorusGrid,
    pub time: &'a TimeGrid,
}

fn check_state(
    controls: &[ControlField],
    densities: &[DensityField],
    weights: &DMatrix<f64>,
    inputs: &CostInputs<'_>,
) -> Result<()> {
    let n = controls.len();
    check_len("densities per crowd", n, densities.len())?;
    check_len("terminal costs per crowd", n, inputs.psi.len())?;
    check_len("aversion matrix rows", n, weights.nrows())?;
    check_len("aversion matrix cols", n, weights.ncols())?;
    let (n_x, n_t) = (inputs.grid.n_x(), inputs.time.n_t());
    if !inputs.kernel.is_local() {
        check_len("kernel width", n_x, inputs.kernel.n_x())?;
    }
    for j in 0..n {
        check_len("control time slices", n_t, controls[j].n_slices())?;
        check_len("control width", n_x, controls[j].values().n_x())?;
        check_len("density time slices", n_t + 1, densities[j].n_slices())?;
        check_len("density width", n_x, densities[j].values().n_x())?;
        check_len("terminal cost", n_x, inputs.psi[j].len())?;
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pooled control objective over all crowds, with `Lambda_bar` weights.
pub fn pooled_risk(
    controls: &[ControlField],
    densities: &[DensityField],
    lambda_bar: &DMatrix<f64>,
    inputs: CostInputs<'_>,
) -> Result<RiskBreakdown> {
    check_state(controls, densities, lambda_bar, &inputs)?;
    let a: Vec<&SpaceTimeField> = controls.iter().map(|c| c.values()).collect();
    let m: Vec<&SpaceTimeField> = densities.iter().map(|d| d.values()).collect();
    Ok(pooled_risk_unchecked(&a, &m, lambda_bar, inputs))
}

pub(crate) fn pooled_risk_unchecked(
    controls: &[&SpaceTimeField],
    densities: &[&SpaceTimeField],
    lambda_bar: &DMatrix<f64>,
    inputs: CostInputs<'_>,
) -> RiskBreakdown {
    let n_crowds = controls.len();
    let n_x = inputs.grid.n_x();
    let n_t = inputs.time.n_t();
    let h = inputs.grid.h();
    let dt = inputs.time.dt();
    let mut crowded = vec![vec![0.0; n_x]; n_crowds];

    let mut energy = 0.0;
    let mut aversion = 0.0;
    for k in 0..n_t {
        let mut e_k = 0.0;
        for j in 0..n_crowds {
            let a = controls[j].slice(k);
            let m = densities[j].slice(k);
            e_k += a.iter().zip(m).map(|(a, m)| a * a * m).sum::<f64>();
        }
        energy += 0.5 * e_k;
        if inputs.aversion_weight != 0.0 {
            for j in 0..n_crowds {
                inputs
                    .kernel
                    .apply_into(densities[j].slice(k), &mut crowded[j]);
            }
            let mut v_k = 0.0;
            for j in 0..n_crowds {
                for l in 0..n_crowds {
                    let w = lambda_bar[(j, l)];
                    if w != 0.0 {
                        v_k += w * dot(&crowded[j], densities[l].slice(k));
                    }
                }
            }
            aversion += v_k;
        }
    }
    let terminal: f64 = (0..n_crowds)
        .map(|j| dot(&inputs.psi[j], densities[j].slice(n_t)))
        .sum();
    RiskBreakdown::new(
        energy * dt * h,
        inputs.aversion_weight * aversion * dt * h,
        terminal * h,
    )
}

/// Own risk of crowd `j` in the game, with `Lambda` row `j` as weights.
pub fn crowd_risk(
    j: usize,
    controls: &[ControlField],
    densities: &[DensityField],
    lambda: &DMatrix<f64>,
    inputs: CostInputs<'_>,
) -> Result<RiskBreakdown> {
    check_state(controls, densities, lambda, &inputs)?;
    if j >= controls.len() {
        return Err(Error::InvalidArgument(format!(
            "crowd index {j} out of range for {} crowds",
            controls.len()
        )));
    }
    let m: Vec<&SpaceTimeField> = densities.iter().map(|d| d.values()).collect();
    Ok(crowd_risk_unchecked(j, controls[j].values(), &m, lambda, inputs))
}

pub(crate) fn crowd_risk_unchecked(
    j: usize,
    control: &SpaceTimeField,
    densities: &[&SpaceTimeField],
    lambda: &DMatrix<f64>,
    inputs: CostInputs<'_>,
) -> RiskBreakdown {
    let n_x = inputs.grid.n_x();
    let n_t = inputs.time.n_t();
    let h = inputs.grid.h();
    let dt = inputs.time.dt();
    let mut crowded = vec![0.0; n_x];
    let mut energy = 0.0;
    let mut aversion = 0.0;
    for k in 0..n_t {
        let a = control.slice(k);
        let mj = densities[j].slice(k);
        energy += 0.5 * a.iter().zip(mj).map(|(a, m)| a * a * m).sum::<f64>();
        if inputs.aversion_weight != 0.0 {
            for (l, ml) in densities.iter().enumerate() {
                let w = lambda[(j, l)];
                if w != 0.0 {
                    inputs.kernel.apply_into(ml.slice(k), &mut crowded);
                    aversion += w * dot(&crowded, mj);
                }
            }
        }
    }
    let terminal = dot(&inputs.psi[j], densities[j].slice(n_t));
    RiskBreakdown::new(
        energy * dt * h,
        inputs.aversion_weight * aversion * dt * h,
        terminal * h,
    )
}

/// Pointwise Hamiltonian `f + sum_j a_j m_j dp_j` at one time level, where
/// `f = sum_j a_j^2 m_j / 2 + C [G[m]^T Lbar m]`. `dp` holds whichever spatial
/// derivative of the costate the caller wants coupled to the drift.
pub fn hamiltonian_integrand(
    a: &[&[f64]],
    m: &[&[f64]],
    dp: &[&[f64]],
    lambda_bar: &DMatrix<f64>,
    kernel: &AversionKernel,
    aversion_weight: f64,
    grid: &TorusGrid,
) -> Result<Vec<f64>> {
    let n = a.len();
    let n_x = grid.n_x();
    check_len("densities per crowd", n, m.len())?;
    check_len("costate gradients per crowd", n, dp.len())?;
    check_len("lambda_bar rows", n, lambda_bar.nrows())?;
    check_len("lambda_bar cols", n, lambda_bar.ncols())?;
    for j in 0..n {
        check_len("control slice", n_x, a[j].len())?;
        check_len("density slice", n_x, m[j].len())?;
        check_len("costate gradient slice", n_x, dp[j].len())?;
    }
    let mut out = vec![0.0; n_x];
    for j in 0..n {
        for i in 0..n_x {
            out[i] += 0.5 * a[j][i] * a[j][i] * m[j][i] + a[j][i] * m[j][i] * dp[j][i];
        }
    }
    if aversion_weight != 0.0 {
        let mut crowded = vec![0.0; n_x];
        for j in 0..n {
            kernel.apply_into(m[j], &mut crowded);
            for l in 0..n {
                let w = lambda_bar[(j, l)];
                for i in 0..n_x {
                    out[i] += aversion_weight * w * crowded[i] * m[l][i];
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of a convexity gate.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvexityVerdict {
    /// Symmetric part of `Lambda_bar` is positive semidefinite (local mode).
    CertifiedPsd { min_eigenvalue: f64 },
    /// Every sampled quadratic form was at least `-1e-10`.
    SampledOk { trials: usize, min_form: f64 },
    Violated(ConvexityWitness),
}

impl ConvexityVerdict {
    pub fn is_violated(&self) -> bool {
        matches!(self, Self::Violated(_))
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::CertifiedPsd { .. } => "certified_psd",
            Self::SampledOk { .. } => "sampled_ok",
            Self::Violated(_) => "violated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvexityWitness {
    /// Negative eigenvalue of `(Lbar + Lbar^T) / 2` with its eigenvector.
    Eigen {
        eigenvalue: f64,
        eigenvector: Vec<f64>,
    },
    /// Density pair whose difference gives a negative quadratic form.
    DensityPair {
        trial: usize,
        form: f64,
        m: Vec<Vec<f64>>,
        m_prime: Vec<Vec<f64>>,
    },
}

/// Tolerance below zero accepted for sampled quadratic forms.
pub const CONVEXITY_TOL: f64 = -1e-10;

/// Quadratic form `h * sum_i sum_{j,l} lbar_jl G[w_j]_i w_{l,i}`.
pub fn aversion_quadratic_form(
    w: &[Vec<f64>],
    lambda_bar: &DMatrix<f64>,
    kernel: &AversionKernel,
    grid: &TorusGrid,
) -> f64 {
    let n_x = grid.n_x();
    let mut crowded = vec![0.0; n_x];
    let mut total = 0.0;
    for (j, wj) in w.iter().enumerate() {
        kernel.apply_into(wj, &mut crowded);
        for (l, wl) in w.iter().enumerate() {
            total += lambda_bar[(j, l)] * dot(&crowded, wl);
        }
    }
    total * grid.h()
}

/// Random smooth probability density: a mixture of one to three wrapped
/// Gaussians with standard deviations between 5% and 25% of the torus.
pub fn random_smooth_density<R: Rng>(rng: &mut R, grid: &TorusGrid) -> Vec<f64> {
    let length = grid.length();
    let bumps = rng.random_range(1..=3);
    let mut m = vec![0.0; grid.n_x()];
    for _ in 0..bumps {
        let centre = rng.random_range(0.0..length);
        let width = rng.random_range(0.05..0.25) * length;
        let weight = rng.random_range(0.05..1.0);
        for (i, v) in m.iter_mut().enumerate() {
            let d = grid.distance(grid.node(i), centre);
            *v += weight * (-d * d / (2.0 * width * width)).exp();
        }
    }
    let mass = grid.h() * m.iter().sum::<f64>();
    m.iter_mut().for_each(|v| *v /= mass);
    m
}

/// Convexity gate. Local mode checks the spectrum of the symmetric part of
/// `Lambda_bar`; nonlocal mode samples the quadratic form on `trials` random
/// density differences, trial `t` drawing from ChaCha stream `t` of `seed`.
pub fn check_convexity(
    lambda_bar: &DMatrix<f64>,
    kernel: &AversionKernel,
    grid: &TorusGrid,
    trials: usize,
    seed: u64,
) -> Result<ConvexityVerdict> {
    check_square(lambda_bar)?;
    if trials == 0 {
        return Err(Error::InvalidArgument("convexity check needs trials >= 1".into()));
    }
    if kernel.is_local() {
        let sym = (lambda_bar + lambda_bar.transpose()) * 0.5;
        let eigen = sym.symmetric_eigen();
        let (idx, &min) = eigen
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty matrix");
        let scale = lambda_bar.amax().max(1.0);
        return Ok(if min >= -1e-12 * scale {
            ConvexityVerdict::CertifiedPsd {
                min_eigenvalue: min,
            }
        } else {
            ConvexityVerdict::Violated(ConvexityWitness::Eigen {
                eigenvalue: min,
                eigenvector: eigen.eigenvectors.column(idx).iter().copied().collect(),
            })
        });
    }
    check_len("kernel width", grid.n_x(), kernel.n_x())?;
    let n_crowds = lambda_bar.nrows();
    let mut min_form = f64::INFINITY;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let m: Vec<Vec<f64>> = (0..n_crowds)
            .map(|_| random_smooth_density(&mut rng, grid))
            .collect();
        let m_prime: Vec<Vec<f64>> = (0..n_crowds)
            .map(|_| random_smooth_density(&mut rng, grid))
            .collect();
        let w: Vec<Vec<f64>> = m
            .iter()
            .zip(&m_prime)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        let form = aversion_quadratic_form(&w, lambda_bar, kernel, grid);
        if form < CONVEXITY_TOL {
            return Ok(ConvexityVerdict::Violated(ConvexityWitness::DensityPair {
                trial,
                form,
                m,
                m_prime,
            }));
        }
        min_form = min_form.min(form);
    }
    Ok(ConvexityVerdict::SampledOk { trials, min_form })
}
