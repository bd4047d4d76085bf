//! Parametric nonlinear benchmark plants.
//!
//! Each plant is a continuous-time vector field advanced over one control
//! interval with classical RK4. The uncertain parameters of a task live in
//! [`SystemParams::uncertain`]; every other coefficient comes from the
//! constants file (see `constants.toml`).

mod cartpole;
mod constants;
mod grn;
mod integrate;
mod process;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MakoError, Result};

pub use cartpole::cartpole_deriv;
pub use constants::{
    CartpoleConstants, GrnConstants, PhysicalConstants, ProcessConstants, SystemConstants,
};
pub use grn::grn_deriv;
pub use integrate::rk4_integrate;
pub use process::process_deriv;

/// Any state entry beyond this magnitude is treated as a blow-up.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Cartpole,
    Grn,
    ReactorSeparator,
}

impl SystemKind {
    pub const ALL: [SystemKind; 3] = [Self::Cartpole, Self::Grn, Self::ReactorSeparator];

    pub fn state_dim(self) -> usize {
        match self {
            Self::Cartpole => 4,
            Self::Grn => 6,
            Self::ReactorSeparator => 9,
        }
    }

    pub fn input_dim(self) -> usize {
        match self {
            Self::Cartpole => 1,
            Self::Grn | Self::ReactorSeparator => 3,
        }
    }

    /// Ranges of the two uncertain coordinates.
    pub fn param_ranges(self) -> [(f64, f64); 2] {
        match self {
            // pole length [m], pole mass [kg]
            Self::Cartpole => [(0.1, 1.0), (0.01, 0.2)],
            // dissociation constant K, input scale b1
            Self::Grn => [(2.0, 8.0), (3.0, 7.0)],
            // feed temperatures T10, T20 [K]
            Self::ReactorSeparator => [(150.0, 450.0), (150.0, 450.0)],
        }
    }

    pub fn nominal_values(self) -> [f64; 2] {
        match self {
            Self::Cartpole => [0.5, 0.1],
            Self::Grn => [5.0, 5.0],
            Self::ReactorSeparator => [300.0, 300.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cartpole => "cartpole",
            Self::Grn => "grn",
            Self::ReactorSeparator => "reactor_separator",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Self::Cartpole => 0,
            Self::Grn => 1,
            Self::ReactorSeparator => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub(crate) fn as_tag(self) -> u8 {
        self.tag()
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = MakoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole" => Ok(Self::Cartpole),
            "grn" => Ok(Self::Grn),
            "reactor_separator" | "process" | "cstr" => Ok(Self::ReactorSeparator),
            other => Err(MakoError::InvalidArgument(format!(
                "unknown system kind `{other}`"
            ))),
        }
    }
}

/// One task setting: the uncertain parameter vector plus fixed constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub uncertain: Vec<f64>,
    pub constants: SystemConstants,
}

impl SystemParams {
    pub fn new(kind: SystemKind, uncertain: Vec<f64>) -> Result<Self> {
        Self::with_constants(PhysicalConstants::builtin().for_kind(kind), uncertain)
    }

    pub fn with_constants(constants: SystemConstants, uncertain: Vec<f64>) -> Result<Self> {
        let kind = constants.kind();
        if uncertain.len() != 2 {
            return Err(MakoError::InvalidArgument(format!(
                "{kind} expects 2 uncertain parameters, got {}",
                uncertain.len()
            )));
        }
        for (v, (lo, hi)) in uncertain.iter().zip(kind.param_ranges()) {
            if !(lo..=hi).contains(v) {
                return Err(MakoError::InvalidArgument(format!(
                    "{kind} parameter {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self {
            uncertain,
            constants,
        })
    }

    pub fn kind(&self) -> SystemKind {
        self.constants.kind()
    }

    pub fn state_dim(&self) -> usize {
        self.kind().state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.kind().input_dim()
    }

    /// Control interval in the plant's time unit.
    pub fn dt(&self) -> f64 {
        match &self.constants {
            SystemConstants::Cartpole(c) => c.dt,
            SystemConstants::Grn(c) => c.dt,
            SystemConstants::ReactorSeparator(c) => c.dt,
        }
    }

    fn substeps(&self) -> usize {
        match &self.constants {
            SystemConstants::Cartpole(c) => c.substeps,
            SystemConstants::Grn(c) => c.substeps,
            SystemConstants::ReactorSeparator(c) => c.substeps,
        }
        .max(1)
    }

    /// Lower and upper input bounds.
    pub fn input_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.constants {
            SystemConstants::Cartpole(c) => (vec![-c.force_max], vec![c.force_max]),
            SystemConstants::Grn(c) => (vec![0.0; 3], vec![c.input_max; 3]),
            SystemConstants::ReactorSeparator(c) => (vec![0.0; 3], c.heat_max.to_vec()),
        }
    }

    pub fn setpoint(&self) -> Vec<f64> {
        match &self.constants {
            SystemConstants::Cartpole(_) => vec![0.0; 4],
            SystemConstants::Grn(c) => {
                let mut s = vec![0.0; 6];
                s[3] = c.setpoint_p1;
                s
            }
            SystemConstants::ReactorSeparator(c) => c.setpoint.to_vec(),
        }
    }

    pub fn deriv(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let p = &self.uncertain;
        match &self.constants {
            SystemConstants::Cartpole(c) => cartpole_deriv(c, p[0], p[1], x, u, out),
            SystemConstants::Grn(c) => grn_deriv(c, p[0], p[1], x, u, out),
            SystemConstants::ReactorSeparator(c) => process_deriv(c, p[0], p[1], x, u, out),
        }
    }

    /// Advances the plant over one control interval.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let n = self.state_dim();
        if x.len() != n || u.len() != self.input_dim() {
            return Err(crate::error::shape_err(
                "step",
                format!("state {n}, input {}", self.input_dim()),
                format!("state {}, input {}", x.len(), u.len()),
            ));
        }
        let substeps = self.substeps();
        let h = self.dt() / substeps as f64;
        let mut state = x.to_vec();
        for _ in 0..substeps {
            state = rk4_integrate(|x, u, out| self.deriv(x, u, out), &state, u, h)?;
            self.clamp_state(&mut state);
        }
        if let Some((component, &value)) = state
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
        {
            return Err(MakoError::Divergence { component, value });
        }
        Ok(state)
    }

    fn clamp_state(&self, x: &mut [f64]) {
        match self.kind() {
            SystemKind::Cartpole => {}
            SystemKind::Grn => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            SystemKind::ReactorSeparator => {
                for vessel in 0..3 {
                    for v in &mut x[3 * vessel..3 * vessel + 2] {
                        *v = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    /// Componentwise projection onto the input box.
    pub fn clamp_input(&self, u: &[f64]) -> Vec<f64> {
        let (lo, hi) = self.input_bounds();
        u.iter()
            .zip(lo.iter().zip(&hi))
            .map(|(v, (l, h))| v.clamp(*l, *h))
            .collect()
    }

    /// Cartpole reporting cost `0.1 (x / x_thr)^2 + (theta / theta_thr)^2`.
    /// Other systems have no stage cost and return `None`.
    pub fn stage_cost(&self, x: &[f64]) -> Option<f64> {
        match &self.constants {
            SystemConstants::Cartpole(c) => {
                let theta_thr = c.theta_threshold_deg.to_radians();
                Some(0.1 * (x[0] / c.x_threshold).powi(2) + (x[2] / theta_thr).powi(2))
            }
            _ => None,
        }
    }

    /// Early-termination rule; only the cartpole has one.
    pub fn is_terminal(&self, x: &[f64]) -> bool {
        match &self.constants {
            SystemConstants::Cartpole(c) => x[2].abs() > c.theta_threshold_deg.to_radians(),
            _ => false,
        }
    }

    /// Draws an initial state from the plant's initial distribution.
    pub fn sample_initial_state<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match &self.constants {
            SystemConstants::Cartpole(c) => (0..4)
                .map(|_| rng.random_range(-c.init_half_width..=c.init_half_width))
                .collect(),
            SystemConstants::Grn(c) => (0..6)
                .map(|_| rng.random_range(c.init_low..=c.init_high))
                .collect(),
            SystemConstants::ReactorSeparator(c) => c
                .setpoint
                .iter()
                .map(|s| rng.random_range(0.8 * s..=1.2 * s))
                .collect(),
        }
    }

    pub fn sample_input<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let (lo, hi) = self.input_bounds();
        lo.iter()
            .zip(&hi)
            .map(|(l, h)| rng.random_range(*l..=*h))
            .collect()
    }
}

pub fn nominal_params(kind: SystemKind) -> SystemParams {
    SystemParams::new(kind, kind.nominal_values().to_vec()).expect("nominal values in range")
}

/// Uniform draw over the parameter space; deterministic in `seed`.
pub fn sample_params(kind: SystemKind, seed: u64) -> SystemParams {
    sample_params_with(PhysicalConstants::builtin(), kind, seed)
}

pub fn sample_params_with(
    constants: &PhysicalConstants,
    kind: SystemKind,
    seed: u64,
) -> SystemParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uncertain = kind
        .param_ranges()
        .iter()
        .map(|&(lo, hi)| rng.random_range(lo..=hi))
        .collect();
    SystemParams::with_constants(constants.for_kind(kind), uncertain)
        .expect("sampled inside the range")
}

/// Latin-hypercube draw of `n` settings: each coordinate's range is cut
/// into `n` equal strata and every stratum receives exactly one uniform
/// sample, so marginals stay uniform while the settings spread out.
pub fn stratified_params_with(
    constants: &PhysicalConstants,
    kind: SystemKind,
    n: usize,
    seed: u64,
) -> Vec<SystemParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranges = kind.param_ranges();
    let columns: Vec<Vec<f64>> = ranges
        .iter()
        .map(|&(lo, hi)| {
            let mut strata: Vec<usize> = (0..n).collect();
            strata.shuffle(&mut rng);
            strata
                .into_iter()
                .map(|s| {
                    let t = (s as f64 + rng.random_range(0.0..1.0)) / n as f64;
                    (lo + t * (hi - lo)).clamp(lo, hi)
                })
                .collect()
        })
        .collect();
    (0..n)
        .map(|i| {
            let uncertain = columns.iter().map(|c| c[i]).collect();
            SystemParams::with_constants(constants.for_kind(kind), uncertain).expect("sampled inside the range")
        })
        .collect()
}

/// `n`-point Cartesian grid over the two uncertain coordinates,
/// endpoints included. `n` must be a perfect square.
pub fn param_grid(kind: SystemKind, n: usize) -> Result<Vec<SystemParams>> {
    param_grid_with(PhysicalConstants::builtin(), kind, n)
}

pub fn param_grid_with(
    constants: &PhysicalConstants,
    kind: SystemKind,
    n: usize,
) -> Result<Vec<SystemParams>> {
    let side = (n as f64).sqrt().round() as usize;
    if n == 0 || side * side != n {
        return Err(MakoError::InvalidArgument(format!(
            "grid size {n} is not a positive perfect square"
        )));
    }
    let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
        if side == 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..side)
            .map(|i| {
                if i == side - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (side - 1) as f64
                }
            })
            .collect()
    };
    let [r0, r1] = kind.param_ranges();
    let (a0, a1) = (axis(r0), axis(r1));
    let mut out = Vec::with_capacity(n);
    for &p0 in &a0 {
        for &p1 in &a1 {
            out.push(SystemParams::with_constants(
                constants.for_kind(kind),
                vec![p0, p1],
            )?);
        }
    }
    Ok(out)
}
