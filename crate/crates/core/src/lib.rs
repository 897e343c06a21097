//! Quadcopter guidance toolkit: optimal trajectory generation by direct
//! collocation, imitation-trained neural control policies, online rotor-limit
//! identification, and closed-loop flight simulation.
//!
//! The crate is organised around the pipeline it implements:
//!
//! - [`dynamics`]: rigid-body + rotor model of the vehicle, generic over the
//!   scalar type so the same equations serve plain evaluation and automatic
//!   differentiation.
//! - [`ad`]: forward-mode dual and second-order scalar types used to obtain
//!   exact Jacobians and Hessians of the dynamics.
//! - [`trajopt`]: Hermite-Simpson collocation with free final time and an
//!   interior-point NLP solver; produces [`trajopt::Trajectory`] values.
//! - [`dataset`]: samples boundary conditions, solves them in bulk, and packs
//!   state/control pairs for imitation learning.
//! - [`policy`]: the small feed-forward network that maps flight state to rotor
//!   commands, with its trainer and serialization.
//! - [`tracker`]: online estimator for the actually attainable rotor-speed
//!   ceiling, driven by commanded vs. observed rotor speeds.
//! - [`sim`]: adaptive Runge-Kutta flight simulator that closes the loop around
//!   a policy, handles waypoint switching, actuator ceilings, and telemetry.
//! - [`io`]: versioned binary container and CSV formats shared by the tools.

pub mod ad;
pub mod dataset;
pub mod dynamics;
pub mod io;
pub mod policy;
pub mod sim;
pub mod tracker;
pub mod trajopt;
