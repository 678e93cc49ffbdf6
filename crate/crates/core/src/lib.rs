//! Spatial equilibrium simulator and city-system statistics toolkit.
//!
//! The crate has two halves that meet in the middle:
//!
//! * **Model side** ([`geometry`], [`economy`], [`solver`], [`ensemble`]): a
//!   many-industry economic-geography model on a ring of discrete locations.
//!   Mobile workers choose a location and an industry; goods are traded with
//!   distance-dependent frictions. The long-run state is a distribution of
//!   workers in which no one can gain by relocating, found by minimising a
//!   merit function for the associated variational inequality. [`ensemble`]
//!   runs seeded Monte Carlo batches of such solves over random draws of
//!   industry demand elasticities.
//!
//! * **Statistics side** ([`citysystem`], [`stats`]): tools that take a city
//!   system — from a solved model state or from an external table — and test
//!   it for regularities: a common power law for city sizes across recursive
//!   partitions of the map, spacing-out of larger cities, and hierarchical
//!   nesting of industry location choices. All randomised tests use explicit
//!   seeds and report permutation p-values.
//!
//! Reproducibility is a design constraint throughout: given the same inputs
//! and seeds, every solve, sample and test yields bit-identical results.

pub mod citysystem;
pub mod economy;
pub mod ensemble;
pub mod error;
pub mod geometry;
mod numeric;
pub mod solver;
pub mod stats;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
