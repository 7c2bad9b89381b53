//! Personal-space kernels and the crowding functional `G[m] = phi * m`.
//!
//! A nonlocal kernel is stored as a weight table indexed by the wrapped cell
//! offset `d`, so that `G[m]_i = h * sum_j w[(i - j) mod n] * m_j`. The local
//! mode stands for the point-mass limit of a shrinking personal space and
//! carries no table; callers use the density itself as the crowding term.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grid::TorusGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    Nonlocal,
    Local,
}

/// Declarative kernel description, as read from a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    #[serde(default = "default_mode")]
    pub mode: KernelMode,
    #[serde(default)]
    pub support_lo: f64,
    #[serde(default = "default_support_hi")]
    pub support_hi: f64,
    /// Mollifier width; `None` means four cells.
    #[serde(default)]
    pub delta: Option<f64>,
}

fn default_mode() -> KernelMode {
    KernelMode::Nonlocal
}

fn default_support_hi() -> f64 {
    0.2
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            mode: KernelMode::Nonlocal,
            support_lo: 0.0,
            support_hi: 0.2,
            delta: None,
        }
    }
}

impl KernelSpec {
    /// Mollifier width actually used on `grid`.
    pub fn delta_on(&self, grid: &TorusGrid) -> f64 {
        self.delta.unwrap_or(4.0 * grid.h())
    }

    /// Builds the kernel: a mollified indicator in nonlocal mode.
    pub fn build(&self, grid: &TorusGrid) -> Result<AversionKernel> {
        match self.mode {
            KernelMode::Local => Ok(AversionKernel::local(grid)),
            KernelMode::Nonlocal => {
                let k = build_indicator_kernel(self.support_lo, self.support_hi, grid)?;
                mollify(&k, self.delta_on(grid), grid)
            }
        }
    }

    /// Same geometry, other mode.
    pub fn with_mode(&self, mode: KernelMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }
}

/// Nonzero entries of a weight table, pre-scaled by `h`.
#[derive(Debug, Clone, PartialEq)]
struct Taps {
    offsets: Vec<usize>,
    scaled: Vec<f64>,
}

impl Taps {
    fn from_weights(weights: &[f64], h: f64) -> Self {
        let (offsets, scaled) = weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(d, w)| (d, w * h))
            .unzip();
        Self { offsets, scaled }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AversionKernel {
    mode: KernelMode,
    n_x: usize,
    weights: Vec<f64>,
    taps: Taps,
    support: (f64, f64),
    delta: f64,
}

impl AversionKernel {
    /// The point-mass limit.
    pub fn local(grid: &TorusGrid) -> Self {
        Self {
            mode: KernelMode::Local,
            n_x: grid.n_x(),
            weights: Vec::new(),
            taps: Taps {
                offsets: Vec::new(),
                scaled: Vec::new(),
            },
            support: (0.0, 0.0),
            delta: 0.0,
        }
    }

    /// Nonlocal kernel from an explicit weight table. Weights must be
    /// nonnegative with unit mass.
    pub fn from_weights(weights: Vec<f64>, grid: &TorusGrid) -> Result<Self> {
        check_len("kernel weights", grid.n_x(), weights.len())?;
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "kernel weights must be finite and nonnegative".into(),
            ));
        }
        let mass = grid.h() * weights.iter().sum::<f64>();
        if (mass - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "kernel must have unit mass, found {mass}"
            )));
        }
        Ok(Self::nonlocal_unchecked(weights, grid, (f64::NAN, f64::NAN), 0.0))
    }

    fn nonlocal_unchecked(
        weights: Vec<f64>,
        grid: &TorusGrid,
        support: (f64, f64),
        delta: f64,
    ) -> Self {
        Self {
            mode: KernelMode::Nonlocal,
            n_x: grid.n_x(),
            taps: Taps::from_weights(&weights, grid.h()),
            weights,
            support,
            delta,
        }
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    pub fn is_local(&self) -> bool {
        self.mode == KernelMode::Local
    }

    /// Weight table indexed by wrapped cell offset (empty in local mode).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Support interval of the underlying indicator.
    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    /// Mollifier width applied (0 if none).
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// Kernel value at a wrapped cell offset.
    #[inline]
    pub fn weight_at(&self, offset: usize) -> f64 {
        self.weights[offset % self.n_x]
    }

    /// True when `w[d] == w[-d]` up to roundoff. Local mode is symmetric.
    pub fn is_symmetric(&self) -> bool {
        if self.is_local() {
            return true;
        }
        let n = self.n_x;
        let scale = self.weights.iter().fold(0.0f64, |m, w| m.max(*w));
        (1..n).all(|d| (self.weights[d] - self.weights[n - d]).abs() <= 1e-12 * scale)
    }

    /// Kernel with `w[d] -> w[-d]`, i.e. the operator transpose.
    pub fn reflected(&self, grid: &TorusGrid) -> Self {
        if self.is_local() {
            return self.clone();
        }
        let n = self.n_x;
        let weights = (0..n).map(|d| self.weights[(n - d) % n]).collect();
        let support = (-self.support.1, -self.support.0);
        Self::nonlocal_unchecked(weights, grid, support, self.delta)
    }

    /// `out = G[m]`. In local mode this copies `m`.
    pub(crate) fn apply_into(&self, m: &[f64], out: &mut [f64]) {
        if self.is_local() {
            out.copy_from_slice(m);
            return;
        }
        out.fill(0.0);
        let n = self.n_x;
        for (&d, &w) in self.taps.offsets.iter().zip(&self.taps.scaled) {
            // out[i] += w * m[i - d], split at the wrap
            let (head, tail) = out.split_at_mut(d);
            for (o, v) in tail.iter_mut().zip(&m[..n - d]) {
                *o += w * v;
            }
            for (o, v) in head.iter_mut().zip(&m[n - d..]) {
                *o += w * v;
            }
        }
    }

    /// `out = G^T[m]`, i.e. `h * sum_j w[(j - i) mod n] m_j`.
    pub(crate) fn apply_transpose_into(&self, m: &[f64], out: &mut [f64]) {
        if self.is_local() {
            out.copy_from_slice(m);
            return;
        }
        out.fill(0.0);
        let n = self.n_x;
        for (&d, &w) in self.taps.offsets.iter().zip(&self.taps.scaled) {
            // out[i] += w * m[i + d]
            let (head, tail) = out.split_at_mut(n - d);
            for (o, v) in head.iter_mut().zip(&m[d..]) {
                *o += w * v;
            }
            for (o, v) in tail.iter_mut().zip(&m[..d]) {
                *o += w * v;
            }
        }
    }
}

/// Normalized indicator of the half-open arc `[lo, hi)`, discretized by cell
/// averages: each cell gets `1/s` times the fraction of it covered by the arc,
/// so interior cells carry height `1/s` and the table has unit mass for any
/// `s`, including supports that are not a whole number of cells.
pub fn build_indicator_kernel(lo: f64, hi: f64, grid: &TorusGrid) -> Result<AversionKernel> {
    let s = hi - lo;
    let length = grid.length();
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidArgument(
            "kernel support must be finite".into(),
        ));
    }
    if !(s > 0.0 && s < length) {
        return Err(Error::InvalidArgument(format!(
            "kernel support length {s} must lie strictly between 0 and the torus length {length}"
        )));
    }
    let h = grid.h();
    let n = grid.n_x();
    // shift the arc so that its start lies in [0, length)
    let shift = lo.div_euclid(length) * length;
    let (a, b) = (lo - shift, hi - shift);
    let mut weights = vec![0.0; n];
    for (d, w) in weights.iter_mut().enumerate() {
        let centre = d as f64 * h;
        let (c_lo, c_hi) = (centre - 0.5 * h, centre + 0.5 * h);
        let mut covered = 0.0;
        for k in -1..=2 {
            let off = k as f64 * length;
            let lo_ = c_lo.max(a + off);
            let hi_ = c_hi.min(b + off);
            if hi_ > lo_ {
                covered += hi_ - lo_;
            }
        }
        *w = covered / (h * s);
    }
    let mass = h * weights.iter().sum::<f64>();
    for w in &mut weights {
        *w /= mass;
    }
    Ok(AversionKernel::nonlocal_unchecked(weights, grid, (lo, hi), 0.0))
}

/// Standard bump `exp(-1/(1-u^2))` on `|u| < 1`.
fn bump(u: f64) -> f64 {
    if u.abs() < 1.0 {
        (-1.0 / (1.0 - u * u)).exp()
    } else {
        0.0
    }
}

/// Discretized mollifier `gamma_delta(x) = gamma(x/delta)/delta` at wrapped
/// offsets, renormalized to unit discrete mass.
pub fn mollifier_table(delta: f64, grid: &TorusGrid) -> Vec<f64> {
    let n = grid.n_x();
    let h = grid.h();
    let mut g: Vec<f64> = (0..n)
        .map(|d| {
            let x = (d.min(n - d)) as f64 * h;
            bump(x / delta)
        })
        .collect();
    let mass = h * g.iter().sum::<f64>();
    for v in &mut g {
        *v /= mass;
    }
    g
}

/// Convolves a nonlocal kernel with the bump of width `delta`. Widths below
/// two cells leave the kernel unchanged.
pub fn mollify(kernel: &AversionKernel, delta: f64, grid: &TorusGrid) -> Result<AversionKernel> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mollifier width must be positive, got {delta}"
        )));
    }
    if kernel.is_local() {
        return Err(Error::Mode("cannot mollify a local kernel"));
    }
    check_len("mollify", grid.n_x(), kernel.n_x())?;
    if delta < 2.0 * grid.h() {
        return Ok(kernel.clone());
    }
    let bump = AversionKernel::nonlocal_unchecked(
        mollifier_table(delta, grid),
        grid,
        (-delta, delta),
        0.0,
    );
    let mut weights = vec![0.0; grid.n_x()];
    bump.apply_into(kernel.weights(), &mut weights);
    // remove convolution roundoff on the unit mass
    let mass = grid.h() * weights.iter().sum::<f64>();
    for w in &mut weights {
        *w = w.max(0.0) / mass;
    }
    Ok(AversionKernel::nonlocal_unchecked(
        weights,
        grid,
        kernel.support,
        delta,
    ))
}

/// Crowding term `G[m]_i = h * sum_j w[(i-j) mod n] m_j`.
pub fn crowding_term(kernel: &AversionKernel, density: &[f64], grid: &TorusGrid) -> Result<Vec<f64>> {
    if kernel.is_local() {
        return Err(Error::Mode(
            "local kernels have no convolution; use the density itself",
        ));
    }
    check_len("crowding_term kernel", grid.n_x(), kernel.n_x())?;
    check_len("crowding_term density", grid.n_x(), density.len())?;
    let mut out = vec![0.0; density.len()];
    kernel.apply_into(density, &mut out);
    Ok(out)
}
