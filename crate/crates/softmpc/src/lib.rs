//! Tightened soft-constrained nonlinear MPC, a learned split value function,
//! and the resulting dynamic-programming controller with an empirical
//! verification suite for its stability and constraint-satisfaction
//! conditions.

pub mod control;
pub mod dataset;
pub mod error;
pub mod jsonio;
pub mod learn;
pub mod model;
pub mod ocp;
pub mod presets;
pub mod sim;
pub mod solver;
pub mod terminal;

pub use error::{Error, Result};
pub use model::{DynamicsModel, InputVec, Polytope, StageCost, StateVec};
pub use ocp::{NlpInstance, NominalOcpSpec, OcpSolution, SoftOcpSpec, SolveStatus};
pub use solver::{SolveStats, SolverConfig};
pub use terminal::TerminalIngredients;
