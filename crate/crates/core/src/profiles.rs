//! Named initial densities and terminal costs.

use crate::error::{Error, Result};
use crate::grid::TorusGrid;
use crate::problem::Crowd;

/// Names accepted by [`builtin_crowd`].
pub const BUILTIN_PROFILES: &[&str] = &["paper_fig1", "uniform"];

/// Wrapped Gaussian density centred at `centre` with standard deviation `sd`,
/// normalized so that the discrete integral is exactly one.
pub fn wrapped_gaussian(centre: f64, sd: f64, grid: &TorusGrid) -> Result<Vec<f64>> {
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::InvalidArgument(format!("standard deviation must be positive, got {sd}")));
    }
    let raw: Vec<f64> = grid
        .nodes()
        .into_iter()
        .map(|x| {
            let d = grid.distance(x, centre);
            (-d * d / (2.0 * sd * sd)).exp()
        })
        .collect();
    let mass: f64 = raw.iter().sum::<f64>() * grid.h();
    Ok(raw.into_iter().map(|v| v / mass).collect())
}

/// Terminal cost `height (1 - exp(-d(x, target)^2 / (2 width^2)))`: cheapest at
/// `target`.
pub fn gaussian_well(target: f64, width: f64, height: f64, grid: &TorusGrid) -> Vec<f64> {
    grid.nodes()
        .into_iter()
        .map(|x| {
            let d = grid.distance(x, target);
            height * (1.0 - (-d * d / (2.0 * width * width)).exp())
        })
        .collect()
}

/// Builtin crowd by name.
///
/// `paper_fig1`: a crowd concentrated around 0 that wants to end up around
/// half the circumference. `uniform`: uniform density with zero terminal cost.
pub fn builtin_crowd(name: &str, grid: &TorusGrid) -> Result<Crowd> {
    let l = grid.length();
    match name {
        "paper_fig1" => Ok(Crowd {
            m0: wrapped_gaussian(0.0, 0.1 * l, grid)?,
            psi: gaussian_well(0.5 * l, 0.1 * l, 2.0, grid),
        }),
        "uniform" => Ok(Crowd {
            m0: vec![1.0 / l; grid.n_x()],
            psi: vec![0.0; grid.n_x()],
        }),
        other => Err(Error::InvalidArgument(format!(
            "unknown profile '{other}', expected one of {BUILTIN_PROFILES:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{check_density_slice, integrate};

    #[test]
    fn builtins_are_valid_crowds() {
        let grid = TorusGrid::unit(64).unwrap();
        for name in BUILTIN_PROFILES {
            let c = builtin_crowd(name, &grid).unwrap();
            check_density_slice(&c.m0, &grid).unwrap();
            assert!((integrate(&c.m0, &grid).unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(c.psi.len(), 64);
        }
        assert!(builtin_crowd("nope", &grid).is_err());
    }

    #[test]
    fn fig1_profile_shape() {
        let grid = TorusGrid::unit(100).unwrap();
        let c = builtin_crowd("paper_fig1", &grid).unwrap();
        let peak = c.m0.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(c.m0[0], peak);
        assert!((c.m0[10] - c.m0[90]).abs() < 1e-12);
        assert_eq!(c.psi[50], 0.0);
        assert!(c.psi[0] > 1.99);
    }
}
