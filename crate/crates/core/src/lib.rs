//! Genetic neural-architecture search with a weight-shared supernet.
//!
//! Cells are encoded as fixed-length integer lists ([`genome`]), evolved by a
//! steady-state genetic algorithm ([`ga`]) and scored by a miniature
//! convolutional supernet whose weights every candidate shares
//! ([`supernet`]). [`search`] ties the two together: each training batch
//! samples a child from the population, each epoch breeds and evaluates a
//! new generation.

// index loops over parallel arrays read better than zipped iterators here
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dot;
pub mod error;
pub mod export;
pub mod ga;
pub mod genome;
pub mod history;
pub mod landscape;
pub mod optim;
pub mod par;
pub mod params;
pub mod rng;
pub mod search;
pub mod supernet;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use ga::{CellType, CrossoverKind, GaConfig, Individual, Population};
pub use genome::{CellGenome, DecodedCell, SearchSpaceSpec};
pub use tensor::Tensor;
