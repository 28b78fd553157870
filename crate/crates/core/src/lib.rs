//! Consensus of saturated single-integrator agents over weighted digraphs.
//!
//! The crate simulates the continuous protocol `x_i' = sat_h(-sum_j L_ij x_j)`
//! and its event-triggered variant, where each agent rebroadcasts its state
//! when the measurement error reaches `alpha_i exp(-beta_i t)`, and evaluates
//! the spectral certificates and Lyapunov functions that explain their
//! convergence.

pub mod certify;
pub mod dynamics;
pub mod event;
pub mod fixtures;
pub mod graph;
pub mod lyapunov;
pub mod scenario;
pub mod spectral;

pub use dynamics::{SaturationLevel, Trajectory};
pub use event::{EventLog, TriggerRule};
pub use graph::{Laplacian, WeightedDigraph};
pub use scenario::{Mode, Scenario};
