//! Fluid model checking for Markov population models.
//!
//! A population of `N` statistically identical agents evolves as a CTMC over
//! per-state counts. As `N` grows, the normalized counts approach the solution
//! of a deterministic ODE (the fluid limit), and a single tagged agent
//! approaches a time-inhomogeneous CTMC whose rate matrix is evaluated along
//! that fluid trajectory. This crate checks time-bounded CSL formulae and
//! reward properties of the tagged agent against the fluid approximation, and
//! ships an exact stochastic simulator and uniformization oracle to validate
//! the approximation empirically.
//!
//! Modules:
//! - [`model`]: the model DSL, well-formedness checks, exact collective
//!   generators for tiny instances.
//! - [`expr`]: rate expressions over parameters and state densities, with a
//!   compiled bytecode form for simulation-speed evaluation.
//! - [`ode`]: adaptive Runge-Kutta 5(4) integration with dense output.
//! - [`fluid`]: drift, fluid trajectories, equilibria, and the tagged-agent
//!   rate matrix.
//! - [`sim`]: stochastic simulation with a tagged agent, ensemble estimators,
//!   uniformization.
//! - [`csl`]: CSL formulae, transient analysis, time-dependent reachability,
//!   boolean signals.
//! - [`reward`]: reward structures and the four reward computations.
//! - [`output`]: deterministic CSV, SVG, and run-manifest serialization.
//! - [`cli`]: the command-line front end.

// Numeric kernels walk several parallel arrays, or two rows of one matrix,
// by index; iterator forms either obscure the stencil or fight the borrow
// checker.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod csl;
pub mod expr;
pub mod fluid;
pub mod model;
pub mod ode;
pub mod output;
pub mod reward;
pub mod sim;
