//! Scenario plumbing for the inversion experiments: TOML configuration,
//! replica orchestration, identity verification, and file emission. The
//! binary in `main.rs` is a thin dispatcher over these modules, and the
//! acceptance suite drives them directly.

pub mod figure;
pub mod report;
pub mod runner;
pub mod scenario;
pub mod verify;
