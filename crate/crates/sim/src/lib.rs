//! Discrete-event simulation of a variant pool under a request stream.
//!
//! [`simulate`] mirrors the registry's acquire and replenish rules so its
//! numbers can be checked against a live server with [`replay`].

pub mod config;
pub mod engine;
pub mod oracle;
pub mod replay;

pub use config::{load_trace, parse_trace, Arrival, GenerationTime, SimConfig, SimError};
pub use engine::{simulate, simulate_with_arrivals, write_event_csv, EventKind, LoggedEvent, SimResult};
