//! Queue-position lotteries for a two-sided waiting market: equilibrium
//! waits, profit/welfare objectives, a bilevel capacity/lottery optimizer,
//! pricing benchmarks and a discrete-event simulator.

pub mod error;
pub mod model;
pub mod equilibrium;
pub(crate) mod linalg;
pub mod objectives;
pub mod lower_solver;
pub mod upper_ga;
pub mod benchmarks;
pub mod simulator;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
