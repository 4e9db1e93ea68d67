pub mod engine;
pub mod error;
pub mod model;
pub mod monitor;
pub mod negotiator;
pub mod network;
pub mod queue;
pub mod report;
pub mod scenario;
pub mod scheduler;
pub mod solve;
pub mod units;

pub use error::{Error, Result};
