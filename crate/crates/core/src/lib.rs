//! Graphical-construction spin dynamics on finite boxes of Z^d, with influence
//! clusters, finite-volume Ising Gibbs states and random-current identity checks.

pub mod coarse;
pub mod currents;
pub mod error;
pub mod experiments;
pub mod gibbs;
pub mod graphical;
pub mod influence;
pub mod lattice;
pub mod rates;
pub mod seeding;
pub mod stats;

pub use error::{Error, Result};
