//! Meta-learned Koopman lifting with per-task linear operators, online
//! operator adaptation and lifted-space adaptive MPC.

pub mod adapt;
mod binio;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mpc;
pub mod network;
pub mod qp;
pub mod seed;
pub mod synthetic;
pub mod systems;
pub mod trainer;

pub use error::{MakoError, Result};
