//! Variational construction of diffusing orbits for a pendulum coupled to a
//! rotor by a small time-periodic perturbation.
//!
//! The pipeline runs bottom-up: [`model`] defines the Lagrangian,
//! [`melnikov`] computes the perturbation action along separatrices,
//! [`variational`] minimizes discretized actions, [`transition`] glues loops
//! at a junction, and [`diffusion`] chains transitions and measures the
//! drift time.

mod dop853_tableau;
pub mod diffusion;
pub mod integrator;
pub mod io;
pub mod melnikov;
pub mod model;
pub mod quadrature;
pub mod summation;
pub mod transition;
pub mod variational;
