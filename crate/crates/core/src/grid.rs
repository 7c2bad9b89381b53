//! Uniform periodic space-time grids and the dense field containers shared
//! by the forward, adjoint and particle solvers.
//!
//! Space is the torus `[0, length)` split into `n_x` cells whose centres are
//! the nodes `x_i = i * h`. Time runs over `[0, horizon]` in `n_t` equal steps.
//! Densities and costates carry `n_t + 1` slices; controls are piecewise
//! constant on `[t_k, t_{k+1})` and carry `n_t`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::forward::{cfl_max_dt, Dynamics};

/// Smallest number of cells accepted for a torus grid.
pub const MIN_CELLS: usize = 8;

/// Tolerance on the unit-mass invariant of density slices.
pub const MASS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusGrid {
    n_x: usize,
    length: f64,
    h: f64,
}

impl TorusGrid {
    pub fn new(n_x: usize, length: f64) -> Result<Self> {
        if n_x < MIN_CELLS {
            return Err(Error::InvalidArgument(format!(
                "torus grid needs at least {MIN_CELLS} cells, got {n_x}"
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "torus length must be positive and finite, got {length}"
            )));
        }
        Ok(Self {
            n_x,
            length,
            h: length / n_x as f64,
        })
    }

    /// Unit torus with `n_x` cells.
    pub fn unit(n_x: usize) -> Result<Self> {
        Self::new(n_x, 1.0)
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Cell width.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_x).map(|i| self.node(i)).collect()
    }

    /// Index of `i + offset` modulo `n_x`.
    #[inline]
    pub fn wrap_index(&self, i: isize) -> usize {
        i.rem_euclid(self.n_x as isize) as usize
    }

    /// Wraps a position into `[0, length)`.
    #[inline]
    pub fn wrap_position(&self, x: f64) -> f64 {
        let y = x.rem_euclid(self.length);
        // rem_euclid can round up to exactly `length`
        if y >= self.length {
            0.0
        } else {
            y
        }
    }

    /// Index of the cell whose centre is nearest to `x`.
    #[inline]
    pub fn nearest_cell(&self, x: f64) -> usize {
        let k = (x / self.h).round() as isize;
        self.wrap_index(k)
    }

    /// Geodesic distance on the torus.
    #[inline]
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let d = (x - y).rem_euclid(self.length);
        d.min(self.length - d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_t: usize,
    dt: f64,
}

impl TimeGrid {
    /// Builds a time grid without any stability check. Solvers re-check the
    /// step against the CFL bound before running.
    pub fn new(horizon: f64, n_t: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "time horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_t == 0 {
            return Err(Error::InvalidArgument("n_t must be at least 1".into()));
        }
        Ok(Self {
            horizon,
            n_t,
            dt: horizon / n_t as f64,
        })
    }

    /// Builds a time grid and rejects it if `dt` exceeds [`cfl_max_dt`].
    pub fn checked(
        horizon: f64,
        n_t: usize,
        grid: &TorusGrid,
        dynamics: &Dynamics,
        a_max: f64,
    ) -> Result<Self> {
        let time = Self::new(horizon, n_t)?;
        time.check_cfl(grid, dynamics, a_max)?;
        Ok(time)
    }

    /// Smallest power-of-two step count whose `dt` satisfies the CFL bound.
    pub fn smallest_pow2(
        horizon: f64,
        grid: &TorusGrid,
        dynamics: &Dynamics,
        a_max: f64,
    ) -> Result<Self> {
        let max_dt = cfl_max_dt(grid, dynamics, a_max);
        let mut n_t = 1usize;
        while horizon / n_t as f64 > max_dt {
            n_t = n_t.checked_mul(2).ok_or_else(|| {
                Error::InvalidArgument("no representable n_t satisfies the CFL bound".into())
            })?;
        }
        Self::new(horizon, n_t)
    }

    pub fn check_cfl(&self, grid: &TorusGrid, dynamics: &Dynamics, a_max: f64) -> Result<()> {
        let max_dt = cfl_max_dt(grid, dynamics, a_max);
        // relative slack so that dt == max_dt computed two ways is accepted
        if self.dt > max_dt * (1.0 + 1e-12) {
            return Err(Error::Cfl {
                dt: self.dt,
                max_dt,
                h: grid.h(),
                sigma: dynamics.sigma(),
                a_max,
            });
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_t {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }
}

/// Dense row-major (time, space) array.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    n_slices: usize,
    n_x: usize,
    data: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(n_slices: usize, n_x: usize) -> Self {
        Self::filled(n_slices, n_x, 0.0)
    }

    pub fn filled(n_slices: usize, n_x: usize, value: f64) -> Self {
        Self {
            n_slices,
            n_x,
            data: vec![value; n_slices * n_x],
        }
    }

    pub fn from_vec(n_slices: usize, n_x: usize, data: Vec<f64>) -> Result<Self> {
        check_len("space-time field data", n_slices * n_x, data.len())?;
        Ok(Self {
            n_slices,
            n_x,
            data,
        })
    }

    /// Field whose every slice is a copy of `slice`.
    pub fn repeat(n_slices: usize, slice: &[f64]) -> Self {
        let mut data = Vec::with_capacity(n_slices * slice.len());
        for _ in 0..n_slices {
            data.extend_from_slice(slice);
        }
        Self {
            n_slices,
            n_x: slice.len(),
            data,
        }
    }

    /// Field with values `f(t_index, x_index)`.
    pub fn from_fn(n_slices: usize, n_x: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n_slices * n_x);
        for k in 0..n_slices {
            for i in 0..n_x {
                data.push(f(k, i));
            }
        }
        Self {
            n_slices,
            n_x,
            data,
        }
    }

    pub fn n_slices(&self) -> usize {
        self.n_slices
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    #[inline]
    pub fn slice(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_x..(k + 1) * self.n_x]
    }

    #[inline]
    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.n_x..(k + 1) * self.n_x]
    }

    pub fn slices(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.n_x)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Writes the field in the `t,x,value` CSV format. `times` gives the time
    /// of each slice; only every `stride`-th slice is written (the last slice
    /// is always included).
    pub fn write_csv<W: Write>(
        &self,
        grid: &TorusGrid,
        times: impl Fn(usize) -> f64,
        stride: usize,
        mut out: W,
    ) -> std::io::Result<()> {
        writeln!(out, "t,x,value")?;
        for k in selected_slices(self.n_slices, stride) {
            let t = times(k);
            for (i, v) in self.slice(k).iter().enumerate() {
                writeln!(out, "{:.16e},{:.16e},{:.16e}", t, grid.node(i), v)?;
            }
        }
        Ok(())
    }
}

/// Slice indices written for a given output stride: `0, stride, 2*stride, ...`
/// plus the final slice.
pub fn selected_slices(n_slices: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut ks: Vec<usize> = (0..n_slices).step_by(stride).collect();
    if n_slices > 0 && ks.last() != Some(&(n_slices - 1)) {
        ks.push(n_slices - 1);
    }
    ks
}

/// A `t,x,value` CSV read back into per-slice arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvField {
    pub times: Vec<f64>,
    pub nodes: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

/// Parses a CSV in the `t,x,value` format. Rows must be grouped by time.
pub fn read_field_csv<R: BufRead>(input: R) -> std::result::Result<CsvField, String> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or("empty csv")?
        .map_err(|e| e.to_string())?;
    if header.trim() != "t,x,value" {
        return Err(format!("unexpected header {header:?}"));
    }
    let mut times: Vec<f64> = Vec::new();
    let mut nodes: Vec<f64> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let mut next = |name: &str| -> std::result::Result<f64, String> {
            parts
                .next()
                .ok_or_else(|| format!("line {}: missing {name}", lineno + 2))?
                .trim()
                .parse::<f64>()
                .map_err(|e| format!("line {}: {name}: {e}", lineno + 2))
        };
        let (t, x, v) = (next("t")?, next("x")?, next("value")?);
        if times.last() != Some(&t) {
            times.push(t);
            values.push(Vec::new());
        }
        if times.len() == 1 {
            nodes.push(x);
        }
        values.last_mut().expect("pushed above").push(v);
    }
    if values.iter().any(|s| s.len() != nodes.len()) {
        return Err("ragged csv: slices have different lengths".into());
    }
    Ok(CsvField {
        times,
        nodes,
        values,
    })
}

/// Probability densities `m(t_k, x_i)` for `k = 0..=n_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField(SpaceTimeField);

impl DensityField {
    /// Wraps solver output, checking nonnegativity and unit mass per slice.
    pub fn new(values: SpaceTimeField, grid: &TorusGrid) -> Result<Self> {
        check_len("density field width", grid.n_x(), values.n_x())?;
        for (k, s) in values.slices().enumerate() {
            check_density_slice(s, grid).map_err(|e| match e {
                Error::InvalidArgument(msg) => {
                    Error::InvalidArgument(format!("density slice {k}: {msg}"))
                }
                other => other,
            })?;
        }
        Ok(Self(values))
    }

    pub(crate) fn new_unchecked(values: SpaceTimeField) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &SpaceTimeField {
        &self.0
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        self.0.slice(k)
    }

    /// Slice at the final time.
    pub fn terminal(&self) -> &[f64] {
        self.0.slice(self.0.n_slices() - 1)
    }

    pub fn n_slices(&self) -> usize {
        self.0.n_slices()
    }

    pub fn into_inner(self) -> SpaceTimeField {
        self.0
    }
}

/// Checks that a density slice is nonnegative with unit mass.
pub fn check_density_slice(slice: &[f64], grid: &TorusGrid) -> Result<()> {
    check_len("density slice", grid.n_x(), slice.len())?;
    if let Some(v) = slice.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "density must be finite and nonnegative, found {v}"
        )));
    }
    let mass = integrate(slice, grid)?;
    if (mass - 1.0).abs() > MASS_TOL {
        return Err(Error::InvalidArgument(format!(
            "density must have unit mass, found {mass}"
        )));
    }
    Ok(())
}

/// Feedback control `a(t_k, x_i)`, piecewise constant in time, with every
/// value inside `[-a_max, a_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlField {
    values: SpaceTimeField,
    a_max: f64,
}

impl ControlField {
    /// Rejects values outside the box.
    pub fn new(values: SpaceTimeField, a_max: f64) -> Result<Self> {
        check_a_max(a_max)?;
        if let Some(v) = values
            .as_slice()
            .iter()
            .find(|v| !(v.is_finite() && v.abs() <= a_max))
        {
            return Err(Error::InvalidArgument(format!(
                "control value {v} outside [-{a_max}, {a_max}]"
            )));
        }
        Ok(Self { values, a_max })
    }

    /// Projects every value onto the box.
    pub fn clamped(mut values: SpaceTimeField, a_max: f64) -> Result<Self> {
        check_a_max(a_max)?;
        for v in values.as_mut_slice() {
            *v = clamp_control(*v, a_max);
        }
        Ok(Self { values, a_max })
    }

    pub fn zeros(time: &TimeGrid, grid: &TorusGrid, a_max: f64) -> Result<Self> {
        Self::new(SpaceTimeField::zeros(time.n_t(), grid.n_x()), a_max)
    }

    pub fn values(&self) -> &SpaceTimeField {
        &self.values
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        self.values.slice(k)
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    pub fn n_slices(&self) -> usize {
        self.values.n_slices()
    }

    pub fn into_inner(self) -> SpaceTimeField {
        self.values
    }
}

fn check_a_max(a_max: f64) -> Result<()> {
    if a_max.is_finite() && a_max > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "a_max must be positive and finite, got {a_max}"
        )))
    }
}

/// Projection onto `[-a_max, a_max]`. NaN maps to 0.
#[inline]
pub fn clamp_control(v: f64, a_max: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-a_max, a_max)
    }
}

/// Costate `p(t_k, x_i)` for `k = 0..=n_t`; the last slice is the terminal cost.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointField(SpaceTimeField);

impl AdjointField {
    pub(crate) fn new_unchecked(values: SpaceTimeField) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &SpaceTimeField {
        &self.0
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        self.0.slice(k)
    }

    pub fn terminal(&self) -> &[f64] {
        self.0.slice(self.0.n_slices() - 1)
    }

    pub fn n_slices(&self) -> usize {
        self.0.n_slices()
    }
}

/// Midpoint-rule integral `h * sum(slice)` over the torus.
pub fn integrate(slice: &[f64], grid: &TorusGrid) -> Result<f64> {
    check_len("integrate", grid.n_x(), slice.len())?;
    Ok(grid.h() * slice.iter().sum::<f64>())
}

/// Periodic central difference `(s[i+1] - s[i-1]) / (2h)`.
pub fn gradient_x(slice: &[f64], grid: &TorusGrid) -> Result<Vec<f64>> {
    check_len("gradient_x", grid.n_x(), slice.len())?;
    let n = slice.len();
    let inv = 0.5 / grid.h();
    Ok((0..n)
        .map(|i| {
            let right = slice[if i + 1 == n { 0 } else { i + 1 }];
            let left = slice[if i == 0 { n - 1 } else { i - 1 }];
            (right - left) * inv
        })
        .collect())
}

/// L1 norm `h * sum |s|`.
pub fn l1_norm(slice: &[f64], grid: &TorusGrid) -> f64 {
    grid.h() * slice.iter().map(|v| v.abs()).sum::<f64>()
}
