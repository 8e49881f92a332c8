//! Demand-response pricing toolkit.
//!
//! Solves the welfare-maximizing scheduling problem for a set of price-responsive
//! users served by one provider, either centrally ([`solver`]) or through a
//! price-broadcast dual decomposition ([`dual`]), with spot-market augmentation
//! ([`spot`]), single-user storage control ([`control`]), a greedy scheduler with
//! an a posteriori optimality-gap bound ([`greedy`]) and a Newton-accelerated
//! price iteration ([`newton`]).

// Per-slot formulas read most directly with explicit slot indices.
#![allow(clippy::needless_range_loop)]

pub mod control;
pub mod dual;
pub mod error;
pub mod generate;
pub mod greedy;
pub mod model;
pub mod newton;
pub mod oracle;
pub mod report;
pub mod solver;
pub mod spot;

pub use error::{Error, Result};
