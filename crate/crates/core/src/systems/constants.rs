use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::SystemKind;
use crate::error::{MakoError, Result};

const BUILTIN: &str = include_str!("../../constants.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartpoleConstants {
    pub cart_mass: f64,
    pub gravity: f64,
    pub dt: f64,
    pub substeps: usize,
    pub force_max: f64,
    pub x_threshold: f64,
    pub theta_threshold_deg: f64,
    pub init_half_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrnConstants {
    pub leak: f64,
    pub max_rate: f64,
    pub hill: f64,
    pub mrna_decay: f64,
    pub protein_rate: f64,
    pub input_gain_2: f64,
    pub input_gain_3: f64,
    pub input_max: f64,
    pub dt: f64,
    pub substeps: usize,
    pub init_low: f64,
    pub init_high: f64,
    pub setpoint_p1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessConstants {
    pub feed_flow_1: f64,
    pub feed_flow_2: f64,
    pub recycle_flow: f64,
    pub purge_flow: f64,
    pub volume_1: f64,
    pub volume_2: f64,
    pub volume_3: f64,
    pub rate_1: f64,
    pub rate_2: f64,
    pub activation_1: f64,
    pub activation_2: f64,
    pub enthalpy_1: f64,
    pub enthalpy_2: f64,
    pub heat_capacity: f64,
    pub density: f64,
    pub molecular_weight: f64,
    pub gas_constant: f64,
    pub volatility_a: f64,
    pub volatility_b: f64,
    pub volatility_c: f64,
    pub feed_fraction_a: f64,
    pub heat_max: [f64; 3],
    pub steady_input: [f64; 3],
    pub setpoint: [f64; 9],
    pub dt: f64,
    pub substeps: usize,
}

/// The whole constants file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalConstants {
    pub cartpole: CartpoleConstants,
    pub grn: GrnConstants,
    pub process: ProcessConstants,
}

/// Constants of a single plant, carried by each task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemConstants {
    Cartpole(CartpoleConstants),
    Grn(GrnConstants),
    ReactorSeparator(ProcessConstants),
}

impl SystemConstants {
    pub fn kind(&self) -> SystemKind {
        match self {
            Self::Cartpole(_) => SystemKind::Cartpole,
            Self::Grn(_) => SystemKind::Grn,
            Self::ReactorSeparator(_) => SystemKind::ReactorSeparator,
        }
    }
}

impl PhysicalConstants {
    /// Constants compiled into the binary from `constants.toml`.
    pub fn builtin() -> &'static PhysicalConstants {
        static CELL: OnceLock<PhysicalConstants> = OnceLock::new();
        CELL.get_or_init(|| Self::parse(BUILTIN).expect("builtin constants.toml is valid"))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MakoError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn for_kind(&self, kind: SystemKind) -> SystemConstants {
        match kind {
            SystemKind::Cartpole => SystemConstants::Cartpole(self.cartpole.clone()),
            SystemKind::Grn => SystemConstants::Grn(self.grn.clone()),
            SystemKind::ReactorSeparator => SystemConstants::ReactorSeparator(self.process.clone()),
        }
    }
}
