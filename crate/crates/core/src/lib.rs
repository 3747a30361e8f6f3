//! Simulator for networks of asynchronous generalized-least-squares learners
//! coupled by an L2 penalty toward their neighbors, with a federated baseline,
//! diffusion-limit integrators and finite-time bound evaluation.

pub mod bounds;
pub mod cli;
pub mod config;
pub mod datamodel;
pub mod engines;
pub mod error;
pub mod gls;
pub mod graph;
pub mod metrics;
pub mod plot;
pub mod rng;
pub mod runner;
pub mod scenarios;
pub mod streams;

pub use error::{Error, Result};
