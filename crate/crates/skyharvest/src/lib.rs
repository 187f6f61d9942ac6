//! # skyharvest
//!
//! Trajectory-planning toolkit for a UAV base station harvesting data from
//! ground IoT nodes over a synthetic 3D city.
//!
//! The pipeline has three stages:
//! 1. **Learning** — a dynamic-programming planner ([`learnplan`]) finds the
//!    flight path over a discrete 3D path graph that minimizes the estimation
//!    error of the segmented (LoS/NLoS) path-loss channel model ([`channel`]).
//! 2. **Map compression** — the raw 3D city geometry ([`citymap`]) is reduced
//!    to per-node logistic LoS-probability models in elevation angle
//!    ([`mapcompress`]), which makes the throughput problem differentiable.
//! 3. **Communication** — block-coordinate descent over a scheduling LP,
//!    a horizontal-trajectory convex step, and an altitude convex step
//!    ([`commplan`]) maximizes the minimum per-node average throughput.
//!    Convex subproblems are solved through the [`conic`] layer.
//!
//! Scenario orchestration, configuration, and figure-table generation live in
//! [`scenario`]; the `skyharvest` binary exposes the same operations as CLI
//! subcommands. Runnable walkthroughs of each capability are in `examples/`.

pub mod channel;
pub mod citymap;
pub mod commplan;
pub mod conic;
pub mod error;
pub mod learnplan;
pub mod mapcompress;
pub mod scenario;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
