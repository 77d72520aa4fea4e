//! Spatial spike-and-slab probit regression for binary lesion masks.

pub mod bootstrap;
pub mod cli;
pub mod cluster;
pub mod design;
pub mod dpe;
pub mod error;
pub mod firth;
pub mod io;
pub mod gibbs;
pub mod lattice;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod normal;
pub mod rng;
pub mod sim;
pub mod vi;

pub use error::{BlessError, Result};
