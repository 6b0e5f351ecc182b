//! Adaptive finite-element simulation of two-phase incompressible flow.
//!
//! The library advects a level-set function with an entropy-viscosity
//! stabilized SSP-RK3 scheme that reinitializes the level set on the fly,
//! couples it to a BDF2 rotational pressure-correction Navier-Stokes solver
//! on Taylor-Hood elements, and keeps the interface resolved with a
//! quadtree mesh that refines and coarsens around the zero level set.
//!
//! Module layout:
//! - [`config`]: numerical constants, fluid properties, scenario files
//! - [`mesh`]: quadtree meshes, refinement, coarsening, field transfer
//! - [`fem`]: Q1/Q2 spaces, constraints, assembly, sparse solvers
//! - [`levelset`]: stabilized level-set transport and reinitialization
//! - [`nsolver`]: BDF2 velocity prediction and pressure correction
//! - [`coupling`]: property blending, surface tension, the coupled step
//! - [`metrics`]: interface diagnostics and convergence tables
//! - [`output`]: VTK and CSV writers
//! - [`scenarios`]: built-in scenario documents
//! - [`runner`]: the time loop driving a scenario to completion

pub mod config;
pub mod coupling;
pub mod fem;
pub mod levelset;
pub mod mesh;
pub mod metrics;
pub mod nsolver;
pub mod output;
pub mod runner;
pub mod scenarios;
