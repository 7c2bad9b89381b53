//! Explicit finite-volume solver for the controlled Fokker-Planck equation
//!
//! ```text
//! dm/dt = (sigma^2 / 2) d2m/dx2 - d(a m)/dx
//! ```
//!
//! on the torus. Diffusion uses the central second difference. Advection uses
//! the Lax-Friedrichs flux splitting
//!
//! ```text
//! F_{i+1/2} = (a_i m_i + a_{i+1} m_{i+1}) / 2 - alpha (m_{i+1} - m_i) / 2
//! ```
//!
//! with the fixed speed `alpha = max(0, a_max - sigma^2 / h)`. Any `alpha`
//! with `alpha + sigma^2 / h >= |a|` makes each step under the CFL bound a
//! convex combination of nonnegative values, so positivity and mass are
//! preserved; the physical diffusion already supplies `sigma^2 / h` of that
//! margin, and only the remainder is added as scheme diffusion `alpha h / 2`.
//! On resolved grids (cell Peclet number `a_max h / sigma^2 <= 1`) this is
//! the plain central scheme. The step is affine in the control, which keeps
//! the discrete risk differentiable (a sign-switched upwind flux has a kink at
//! `a = 0` that stalls gradient descent).

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grid::{check_density_slice, ControlField, DensityField, SpaceTimeField, TimeGrid, TorusGrid};

/// Fraction of the stability limit used by [`cfl_max_dt`].
pub const CFL_SAFETY: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DriftMode {
    /// `b(t, x, a) = a`: pedestrians choose their velocity.
    #[default]
    ControlIsVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    sigma: f64,
    drift: DriftMode,
}

impl Dynamics {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be finite and nonnegative, got {sigma}"
            )));
        }
        Ok(Self {
            sigma,
            drift: DriftMode::ControlIsVelocity,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn drift(&self) -> DriftMode {
        self.drift
    }

    /// Diffusion coefficient `sigma^2 / 2`.
    pub fn diffusivity(&self) -> f64 {
        0.5 * self.sigma * self.sigma
    }
}

/// Largest stable time step, `0.4 * min(h^2 / sigma^2, h / a_max)`. Terms with
/// a zero coefficient are dropped; with neither present the bound is infinite.
pub fn cfl_max_dt(grid: &TorusGrid, dynamics: &Dynamics, a_max: f64) -> f64 {
    let h = grid.h();
    let mut bound = f64::INFINITY;
    let s2 = dynamics.sigma() * dynamics.sigma();
    if s2 > 0.0 {
        bound = bound.min(h * h / s2);
    }
    if a_max > 0.0 {
        bound = bound.min(h / a_max);
    }
    CFL_SAFETY * bound
}

/// Lax-Friedrichs speed `max(0, a_max - sigma^2 / h)` needed for positivity
/// on top of the physical diffusion.
pub fn scheme_speed(grid: &TorusGrid, dynamics: &Dynamics, a_max: f64) -> f64 {
    (a_max - 2.0 * dynamics.diffusivity() / grid.h()).max(0.0)
}

/// Coefficients of one explicit step, precomputed from the grids.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepCoefficients {
    /// `D dt / h^2 + alpha dt / (2h)`: physical plus scheme diffusion.
    pub diffusion: f64,
    /// `dt / (2h)`
    pub advection: f64,
}

impl StepCoefficients {
    /// `a_max` is the box bound of the controls that will be applied.
    pub fn new(grid: &TorusGrid, time: &TimeGrid, dynamics: &Dynamics, a_max: f64) -> Self {
        let h = grid.h();
        let dt = time.dt();
        let alpha = scheme_speed(grid, dynamics, a_max);
        Self {
            diffusion: dynamics.diffusivity() * dt / (h * h) + 0.5 * alpha * dt / h,
            advection: 0.5 * dt / h,
        }
    }
}

#[inline]
fn neighbours(i: usize, n: usize) -> (usize, usize) {
    (if i == 0 { n - 1 } else { i - 1 }, if i + 1 == n { 0 } else { i + 1 })
}

/// One forward step `out = A(a) m`.
pub(crate) fn forward_step(m: &[f64], a: &[f64], c: StepCoefficients, out: &mut [f64]) {
    let n = m.len();
    for i in 0..n {
        let (l, r) = neighbours(i, n);
        out[i] = m[i] + c.diffusion * (m[r] - 2.0 * m[i] + m[l]) - c.advection * (a[r] * m[r] - a[l] * m[l]);
    }
}

/// One backward step `out = A(a)^T p`: central drift `a dp/dx` plus the same
/// diffusion.
pub(crate) fn transpose_step(p: &[f64], a: &[f64], c: StepCoefficients, out: &mut [f64]) {
    let n = p.len();
    for i in 0..n {
        let (l, r) = neighbours(i, n);
        out[i] = p[i] + c.diffusion * (p[r] - 2.0 * p[i] + p[l]) + c.advection * a[i] * (p[r] - p[l]);
    }
}

/// Density trajectory from `m0` under `control`.
pub fn solve_forward(
    m0: &[f64],
    control: &ControlField,
    dynamics: &Dynamics,
    grid: &TorusGrid,
    time: &TimeGrid,
) -> Result<DensityField> {
    check_density_slice(m0, grid)?;
    check_len("control time slices", time.n_t(), control.n_slices())?;
    check_len("control width", grid.n_x(), control.values().n_x())?;
    time.check_cfl(grid, dynamics, control.a_max())?;
    Ok(solve_forward_unchecked(m0, control.values(), control.a_max(), dynamics, grid, time))
}

pub(crate) fn solve_forward_unchecked(
    m0: &[f64],
    control: &SpaceTimeField,
    a_max: f64,
    dynamics: &Dynamics,
    grid: &TorusGrid,
    time: &TimeGrid,
) -> DensityField {
    let n_x = grid.n_x();
    let n_t = time.n_t();
    let c = StepCoefficients::new(grid, time, dynamics, a_max);
    let mut field = SpaceTimeField::zeros(n_t + 1, n_x);
    field.slice_mut(0).copy_from_slice(m0);
    let data = field.as_mut_slice();
    for k in 0..n_t {
        let (done, rest) = data.split_at_mut((k + 1) * n_x);
        forward_step(&done[k * n_x..], control.slice(k), c, &mut rest[..n_x]);
    }
    DensityField::new_unchecked(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::integrate;
    use proptest::prelude::*;

    fn unit(n: usize) -> TorusGrid {
        TorusGrid::unit(n).unwrap()
    }

    fn bump(grid: &TorusGrid, centre: f64, width: f64) -> Vec<f64> {
        let raw: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|x| {
                let d = grid.distance(*x, centre);
                (-d * d / (2.0 * width * width)).exp()
            })
            .collect();
        let mass = integrate(&raw, grid).unwrap();
        raw.into_iter().map(|v| v / mass).collect()
    }

    #[test]
    fn cfl_examples() {
        let g = unit(128);
        let h = g.h();
        let d1 = Dynamics::new(1.0).unwrap();
        assert!((cfl_max_dt(&g, &d1, 0.0) - 0.4 * h * h).abs() < 1e-18);
        assert!((cfl_max_dt(&g, &d1, 0.0) - 2.44140625e-5).abs() < 1e-15);
        let d0 = Dynamics::new(0.0).unwrap();
        assert!((cfl_max_dt(&g, &d0, 2.0) - 1.5625e-3).abs() < 1e-15);
        assert_eq!(cfl_max_dt(&g, &d0, 0.0), f64::INFINITY);
        // the section-5 defaults need 2^16 steps at n_x = 128
        let t = TimeGrid::smallest_pow2(1.0, &g, &d1, 10.0).unwrap();
        assert_eq!(t.n_t(), 65536);
        assert!(TimeGrid::checked(1.0, 32768, &g, &d1, 10.0).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = unit(16);
        let d = Dynamics::new(1.0).unwrap();
        let t = TimeGrid::checked(0.01, 100, &g, &d, 1.0).unwrap();
        let a = ControlField::zeros(&t, &g, 1.0).unwrap();
        assert!(solve_forward(&[1.0; 16], &a, &d, &g, &t).is_ok());
        assert!(solve_forward(&[2.0; 16], &a, &d, &g, &t).is_err());
        let mut neg = vec![1.0; 16];
        neg[0] = -1.0;
        neg[1] = 3.0;
        assert!(solve_forward(&neg, &a, &d, &g, &t).is_err());
        let coarse = TimeGrid::new(0.01, 2).unwrap();
        let a2 = ControlField::zeros(&coarse, &g, 1.0).unwrap();
        assert!(matches!(
            solve_forward(&[1.0; 16], &a2, &d, &g, &coarse),
            Err(Error::Cfl { .. })
        ));
        assert!(Dynamics::new(-1.0).is_err());
    }

    #[test]
    fn uniform_is_stationary_without_drift() {
        let g = unit(32);
        let d = Dynamics::new(1.0).unwrap();
        let t = TimeGrid::smallest_pow2(0.1, &g, &d, 1.0).unwrap();
        let a = ControlField::zeros(&t, &g, 1.0).unwrap();
        let m = solve_forward(&[1.0; 32], &a, &d, &g, &t).unwrap();
        for s in m.values().slices() {
            assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-14));
        }
    }

    #[test]
    fn variance_grows_linearly_under_pure_diffusion() {
        let g = unit(256);
        // resolved grid: no scheme diffusion; coarse Peclet number: sigma^2 + alpha h
        for (sigma, a_max) in [(1.0, 1.0), (0.1, 10.0)] {
            let d = Dynamics::new(sigma).unwrap();
            let alpha = scheme_speed(&g, &d, a_max);
            assert_eq!(alpha == 0.0, sigma == 1.0);
            let rate = sigma * sigma + alpha * g.h();
            let t = TimeGrid::smallest_pow2(0.005, &g, &d, a_max).unwrap();
            let a = ControlField::zeros(&t, &g, a_max).unwrap();
            let m0 = bump(&g, 0.5, 0.02);
            let m = solve_forward(&m0, &a, &d, &g, &t).unwrap();
            let variance = |s: &[f64]| {
                let xs = g.nodes();
                let mean: f64 = g.h() * s.iter().zip(&xs).map(|(v, x)| v * x).sum::<f64>();
                g.h() * s.iter().zip(&xs).map(|(v, x)| v * (x - mean).powi(2)).sum::<f64>()
            };
            let v0 = variance(m.slice(0));
            for k in [t.n_t() / 4, t.n_t() / 2, t.n_t()] {
                let grown = variance(m.slice(k)) - v0;
                assert!(
                    (grown - rate * t.time(k)).abs() < 1e-6 * t.time(k),
                    "sigma={sigma} k={k}: grown {grown} vs rate {rate} t {}",
                    t.time(k)
                );
            }
        }
    }

    /// Dense one-step matrix assembled from mass transfers, independent of
    /// the flux-form code path.
    fn transfer_matrix(a: &[f64], c: StepCoefficients) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut mat = vec![vec![0.0; n]; n];
        for j in 0..n {
            let l = (j + n - 1) % n;
            let r = (j + 1) % n;
            // cell j keeps 1 - 2 nu and sends nu +- a_j dt/(2h) to each side
            mat[j][j] += 1.0 - 2.0 * c.diffusion;
            mat[r][j] += c.diffusion + c.advection * a[j];
            mat[l][j] += c.diffusion - c.advection * a[j];
        }
        mat
    }

    #[test]
    fn one_step_matches_dense_transfer_matrix() {
        let g = unit(32);
        let d = Dynamics::new(1.0).unwrap();
        let t = TimeGrid::checked(1e-3, 10, &g, &d, 3.0).unwrap();
        let c = StepCoefficients::new(&g, &t, &d, 3.0);
        let a: Vec<f64> = (0..32).map(|i| 3.0 * ((i as f64) * 0.7).sin()).collect();
        let m0 = bump(&g, 0.3, 0.1);
        let mut stepped = vec![0.0; 32];
        forward_step(&m0, &a, c, &mut stepped);
        let mat = transfer_matrix(&a, c);
        for j in 0..32 {
            assert!(mat.iter().all(|row| row[j] >= 0.0));
            assert!((mat.iter().map(|row| row[j]).sum::<f64>() - 1.0).abs() < 1e-15);
        }
        for i in 0..32 {
            let expected: f64 = (0..32).map(|j| mat[i][j] * m0[j]).sum();
            assert!((stepped[i] - expected).abs() < 1e-13);
        }
        // the backward step is the exact transpose
        let p: Vec<f64> = (0..32).map(|i| ((i * i) % 7) as f64).collect();
        let mut back = vec![0.0; 32];
        transpose_step(&p, &a, c, &mut back);
        for j in 0..32 {
            let expected: f64 = (0..32).map(|i| mat[i][j] * p[i]).sum();
            assert!((back[j] - expected).abs() < 1e-12);
        }
    }

    fn random_control(seed: u64, n_t: usize, n_x: usize, a_max: f64) -> SpaceTimeField {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        SpaceTimeField::from_fn(n_t, n_x, |_, _| rng.random_range(-a_max..=a_max))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn conserves_mass_and_positivity(seed in any::<u64>(), sigma in 0.0f64..2.0, a_max in 0.1f64..20.0) {
            let g = unit(32);
            let d = Dynamics::new(sigma).unwrap();
            let t = TimeGrid::smallest_pow2(0.05, &g, &d, a_max).unwrap();
            let a = ControlField::new(random_control(seed, t.n_t(), 32, a_max), a_max).unwrap();
            let m0 = bump(&g, 0.2, 0.05);
            let m = solve_forward(&m0, &a, &d, &g, &t).unwrap();
            let mut prev = 1.0;
            for s in m.values().slices() {
                let mass = integrate(s, &g).unwrap();
                prop_assert!((mass - prev).abs() <= 1e-14);
                prop_assert!((mass - 1.0).abs() <= 1e-10);
                prop_assert!(s.iter().all(|v| *v >= 0.0));
                prev = mass;
            }
        }
    }
}
