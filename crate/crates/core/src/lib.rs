//! Desk-scale simulation and analysis of cosmic-ray-like (CRL) correlated
//! decay events in a modular superconducting qubit processor.
//!
//! The crate covers the full telemetry pipeline:
//!
//! - [`model`]: device topology, cycle clock and event records shared by all
//!   stages.
//! - [`sim`]: seeded Monte Carlo generation of correlated decay bursts and
//!   synthesis of per-channel measurement bit-streams.
//! - [`preprocess`]: conversion of raw g/e traces into the all-ground
//!   three-cycle error stream and binned decay probabilities.
//! - [`detect`]: zero-sum matched-filter event detection and contrast-template
//!   start time estimation, with a streaming driver bounded by O(kernel +
//!   chunk) state.
//! - [`stats`]: recovery-constant fitting, coincidence matrices, inter-arrival
//!   statistics and chance-coincidence estimates.
//! - [`io`]: the bit-packed trace file format, run configuration and event
//!   list serialization.

pub mod bits;
pub mod detect;
pub mod io;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod time;
pub mod trace;

pub use model::{
    paper_topology, ChannelKind, ChannelSpec, CycleClock, EventRecord, EventSource, RegionKind,
    RegionSpec, Topology,
};
pub use time::Nanos;
pub use trace::QubitTrace;
