//! Near potential differential games (NPDGs) for limited-information shared control.
//!
//! The crate computes Nash equilibria of two-player LQ games, identifies a single-agent
//! potential surrogate from trajectories, derives a cooperation state that replaces the
//! human-controlled states, and designs full- and limited-information shared controllers
//! for a vehicle-manipulator plant.

pub mod error;
pub mod identify;
pub mod io;
pub mod linalg;
pub mod lisc;
pub mod lqgame;
pub mod optim;
pub mod potential;
pub mod scalar;
pub mod vmsim;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision aliases for the common types.
pub type Dynamics = lqgame::LtiGameDynamics<f64>;
pub type Game = lqgame::DifferentialGame<f64>;
pub type Nash = lqgame::NashSolution<f64>;
pub type Potential = potential::PotentialGame<f64>;
pub type Identification = identify::IdentificationResult<f64>;
pub type Controller = lisc::LiscController<f64>;

/// Single-precision aliases.
pub type DynamicsF32 = lqgame::LtiGameDynamics<f32>;
pub type GameF32 = lqgame::DifferentialGame<f32>;
pub type NashF32 = lqgame::NashSolution<f32>;
pub type PotentialF32 = potential::PotentialGame<f32>;
pub type IdentificationF32 = identify::IdentificationResult<f32>;
pub type ControllerF32 = lisc::LiscController<f32>;
