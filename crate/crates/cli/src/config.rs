//! Run configuration: TOML schema, defaults and validation.

use std::path::Path;

use mfcrowd_core::optimizer::GdmParams;
use mfcrowd_core::profiles::builtin_crowd;
use mfcrowd_core::{
    AversionMatrices, AversionKernel, Crowd, DMatrix, Dynamics, KernelMode, KernelSpec,
    MultiCrowdProblem, TimeGrid, TorusGrid,
};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Keys that have no default, as dotted paths.
pub const REQUIRED_KEYS: &[&str] = &[
    "horizon",
    "aversion_weight",
    "grid.n_x",
    "dynamics.sigma",
    "crowds",
];

/// Which optimization problems a run solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ArmSelection {
    Local,
    Nonlocal,
    Both,
}

impl ArmSelection {
    pub fn arms(self) -> Vec<Arm> {
        match self {
            Self::Local => vec![Arm::Local],
            Self::Nonlocal => vec![Arm::Nonlocal],
            Self::Both => vec![Arm::Nonlocal, Arm::Local],
        }
    }
}

/// One optimization problem of a run: the configured personal space, or its
/// point-mass limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Nonlocal,
    Local,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Nonlocal => "nonlocal",
            Self::Local => "local",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_x: usize,
    /// Time steps; the smallest CFL-stable power of two when absent.
    #[serde(default)]
    pub n_t: Option<usize>,
    #[serde(default = "one")]
    pub length: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub sigma: f64,
}

/// A crowd given by a builtin profile, tabulated arrays, or a profile with
/// some of its arrays replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrowdConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    /// Initial density at the grid nodes; renormalized to unit mass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m0: Option<Vec<f64>>,
    /// Terminal cost at the grid nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<Vec<f64>>,
    /// This crowd's row of the aversion matrix; defaults to `[1]` for a single
    /// crowd.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvexityConfig {
    pub trials: usize,
}

impl Default for ConvexityConfig {
    fn default() -> Self {
        Self { trials: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleConfig {
    pub enabled: bool,
    pub sizes: Vec<usize>,
    pub replicates: usize,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            sizes: vec![100, 400, 1600],
            replicates: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Approximate number of time intervals written to the field CSVs; the
    /// time stride is `max(1, n_t / time_slices)` and the final time is
    /// always included.
    pub time_slices: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { time_slices: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub horizon: f64,
    pub aversion_weight: f64,
    #[serde(default)]
    pub seed: u64,
    /// Arms to solve; both when the kernel is nonlocal, otherwise local.
    #[serde(default)]
    pub arm: Option<ArmSelection>,
    pub grid: GridConfig,
    pub dynamics: DynamicsConfig,
    #[serde(default)]
    pub kernel: KernelSpec,
    pub crowds: Vec<CrowdConfig>,
    #[serde(default)]
    pub optimizer: GdmParams,
    #[serde(default)]
    pub convexity: ConvexityConfig,
    #[serde(default)]
    pub particles: ParticleConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Validated run: the resolved configuration plus everything needed to build
/// each arm's problem.
#[derive(Debug, Clone)]
pub struct Experiment {
    /// Configuration with every default filled in.
    pub config: RunConfig,
    pub grid: TorusGrid,
    pub time: TimeGrid,
    pub dynamics: Dynamics,
    pub crowds: Vec<Crowd>,
    pub weights: AversionMatrices,
}

impl Experiment {
    pub fn arms(&self) -> Vec<Arm> {
        self.config.arm.unwrap_or(ArmSelection::Both).arms()
    }

    pub fn kernel(&self, arm: Arm) -> mfcrowd_core::Result<AversionKernel> {
        match arm {
            Arm::Local => Ok(AversionKernel::local(&self.grid)),
            Arm::Nonlocal => self.config.kernel.with_mode(KernelMode::Nonlocal).build(&self.grid),
        }
    }

    pub fn problem(&self, arm: Arm) -> mfcrowd_core::Result<MultiCrowdProblem> {
        MultiCrowdProblem::new(
            self.grid,
            self.time,
            self.dynamics,
            self.kernel(arm)?,
            self.config.aversion_weight,
            self.crowds.clone(),
            self.weights.clone(),
        )
    }

    /// Time stride of the field CSVs.
    pub fn output_stride(&self) -> usize {
        (self.time.n_t() / self.config.output.time_slices.max(1)).max(1)
    }
}

/// Reads and validates a TOML run configuration.
pub fn parse_config(path: &Path) -> Result<Experiment, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<Experiment, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
    let missing: Vec<String> = REQUIRED_KEYS
        .iter()
        .filter(|key| lookup(&table, key).is_none())
        .map(|key| key.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ConfigError::MissingKeys(missing));
    }
    let config: RunConfig =
        toml::from_str(text).map_err(|e: toml::de::Error| ConfigError::Schema(e.message().to_string()))?;
    resolve(config)
}

fn lookup<'a>(table: &'a toml::Table, dotted: &str) -> Option<&'a toml::Value> {
    let mut parts = dotted.split('.');
    let mut value = table.get(parts.next()?)?;
    for part in parts {
        value = value.as_table()?.get(part)?;
    }
    Some(value)
}

/// Validates a parsed configuration and fills in its defaults.
pub fn resolve(mut config: RunConfig) -> Result<Experiment, ConfigError> {
    let invalid = |msg: String| ConfigError::Invalid(msg);
    let grid = TorusGrid::new(config.grid.n_x, config.grid.length)?;
    let dynamics = Dynamics::new(config.dynamics.sigma)?;
    config.optimizer.validate()?;
    let a_max = config.optimizer.a_max;
    let time = match config.grid.n_t {
        Some(n_t) => TimeGrid::checked(config.horizon, n_t, &grid, &dynamics, a_max)?,
        None => TimeGrid::smallest_pow2(config.horizon, &grid, &dynamics, a_max)?,
    };
    config.grid.n_t = Some(time.n_t());
    config.kernel.delta = Some(config.kernel.delta_on(&grid));

    let kernel_mode = config.kernel.mode;
    let selection = config.arm.unwrap_or(match kernel_mode {
        KernelMode::Nonlocal => ArmSelection::Both,
        KernelMode::Local => ArmSelection::Local,
    });
    if kernel_mode == KernelMode::Local && selection != ArmSelection::Local {
        return Err(invalid(
            "kernel.mode = \"local\" leaves no personal space for the nonlocal arm".into(),
        ));
    }
    config.arm = Some(selection);

    if config.crowds.is_empty() {
        return Err(invalid("at least one [[crowds]] entry is required".into()));
    }
    let n_crowds = config.crowds.len();
    let mut crowds = Vec::with_capacity(n_crowds);
    let mut lambda = DMatrix::zeros(n_crowds, n_crowds);
    for (j, spec) in config.crowds.iter_mut().enumerate() {
        crowds.push(build_crowd(j, spec, &grid)?);
        let row = match (&spec.lambda, n_crowds) {
            (Some(row), _) => row.clone(),
            (None, 1) => vec![1.0],
            (None, _) => {
                return Err(invalid(format!(
                    "crowds[{j}].lambda is required when there are {n_crowds} crowds"
                )))
            }
        };
        if row.len() != n_crowds {
            return Err(invalid(format!(
                "crowds[{j}].lambda has {} entries, expected {n_crowds}",
                row.len()
            )));
        }
        for (l, v) in row.iter().enumerate() {
            lambda[(j, l)] = *v;
        }
        spec.lambda = Some(row);
    }
    let weights = AversionMatrices::from_lambda(lambda)?;

    if config.convexity.trials == 0 {
        return Err(invalid("convexity.trials must be at least 1".into()));
    }
    if config.particles.sizes.is_empty() || config.particles.sizes.contains(&0) {
        return Err(invalid("particles.sizes must be a nonempty list of positive counts".into()));
    }
    if config.particles.replicates == 0 {
        return Err(invalid("particles.replicates must be at least 1".into()));
    }

    let experiment = Experiment {
        config,
        grid,
        time,
        dynamics,
        crowds,
        weights,
    };
    // surface kernel and problem errors (e.g. asymmetric kernels with
    // several crowds) at load time
    for arm in experiment.arms() {
        experiment.problem(arm)?;
    }
    Ok(experiment)
}

fn build_crowd(j: usize, spec: &CrowdConfig, grid: &TorusGrid) -> Result<Crowd, ConfigError> {
    let base = match &spec.profile {
        Some(name) => Some(builtin_crowd(name, grid)?),
        None => None,
    };
    let m0 = match (&spec.m0, &base) {
        (Some(m0), _) => renormalize(j, m0, grid)?,
        (None, Some(b)) => b.m0.clone(),
        (None, None) => {
            return Err(ConfigError::Invalid(format!(
                "crowds[{j}] needs a profile or an m0 array"
            )))
        }
    };
    let psi = match (&spec.psi, &base) {
        (Some(psi), _) => {
            if psi.len() != grid.n_x() {
                return Err(ConfigError::Invalid(format!(
                    "crowds[{j}].psi has {} values, expected n_x = {}",
                    psi.len(),
                    grid.n_x()
                )));
            }
            psi.clone()
        }
        (None, Some(b)) => b.psi.clone(),
        (None, None) => {
            return Err(ConfigError::Invalid(format!(
                "crowds[{j}] needs a profile or a psi array"
            )))
        }
    };
    Ok(Crowd { m0, psi })
}

/// Scales a tabulated density to unit discrete mass, reporting the rescale.
fn renormalize(j: usize, m0: &[f64], grid: &TorusGrid) -> Result<Vec<f64>, ConfigError> {
    if m0.len() != grid.n_x() {
        return Err(ConfigError::Invalid(format!(
            "crowds[{j}].m0 has {} values, expected n_x = {}",
            m0.len(),
            grid.n_x()
        )));
    }
    if m0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(ConfigError::Invalid(format!(
            "crowds[{j}].m0 must be finite and nonnegative"
        )));
    }
    let mass: f64 = m0.iter().sum::<f64>() * grid.h();
    if !(mass.is_finite() && mass > 0.0) {
        return Err(ConfigError::Invalid(format!("crowds[{j}].m0 has zero mass")));
    }
    if (mass - 1.0).abs() > mfcrowd_core::grid::MASS_TOL {
        eprintln!("note: crowds[{j}].m0 had mass {mass:.6e}; renormalized to 1");
    }
    Ok(m0.iter().map(|v| v / mass).collect())
}
