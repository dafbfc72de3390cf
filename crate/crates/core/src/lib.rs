//! Transient dynamics of AC power grids with adaptive virtual inertia.
//!
//! The crate models a lossless transmission grid as coupled phase
//! oscillators. Synchronous machines and virtual synchronous generators
//! (VSGs) obey the swing equation
//!
//! ```text
//! m_i dω_i/dt + d_i ω_i = P_i - Σ_j b_ij sin(θ_i - θ_j),
//! ```
//!
//! while passive loads follow the structure-preserving first-order form
//! `d_i dθ_i/dt = P_i - Σ_j b_ij sin(θ_i - θ_j)`. VSG inertia is a state
//! of its own, raised in proportion to the local rate of change of
//! frequency and relaxed back toward a floor:
//!
//! ```text
//! dm_i/dt = α_i |dω_i/dt| - β_i (m_i - m_min,i).
//! ```
//!
//! Module map:
//!
//! * [`grid`]: network description, validation, JSON codec, parameter
//!   sampling and VSG promotion.
//! * [`equilibrium`]: Newton solve of the pre-fault power-flow fixed point
//!   and the synchronous post-fault frequency offset.
//! * [`ode`]: an embedded Dormand-Prince 5(4) stepper with dense output.
//! * [`dynamics`]: the right-hand side, fault injection, inertia policies
//!   and the adaptive-step trajectory sampler.
//! * [`metrics`]: disturbance norms, resynchronization time, coherency and
//!   the convergence checks behind them.
//! * [`stability`]: linearization at the fixed point and the
//!   spectrum-union check for all-VSG grids.
//! * [`synth`]: seeded random test grids.
//! * [`harness`]: scenario configs, parameter sweeps, fault campaigns and
//!   placement comparisons, parallel over scenarios.

pub mod dynamics;
pub mod equilibrium;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod ode;
pub mod stability;
pub mod synth;

pub use dynamics::{integrate, Fault, IntegrateOptions, Trajectory, VsgPolicy};
pub use equilibrium::{solve_fixed_point, FixedPoint};
pub use grid::{Grid, GridError, Line, Node, NodeKind};
pub use metrics::{compute_report, MetricsReport};
pub use stability::{full_jacobian, spectrum_union_check, SpectrumReport};
