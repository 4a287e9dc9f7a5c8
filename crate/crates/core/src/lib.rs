//! Exemplar-based image translation with masked cross-domain attention.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod mat;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
