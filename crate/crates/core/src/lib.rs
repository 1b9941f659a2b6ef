//! Two-party secure computation over additive shares, and a private
//! data-selection pipeline built on top of it.

pub mod approx;
pub mod cli;
pub mod config;
pub mod error;
pub mod format;
pub mod nn;
pub mod pipeline;
pub mod protocols;
pub mod proxy;
pub mod ring;
pub mod scheduler;
pub mod seeds;
pub mod selection;
pub mod session;
pub mod shares;
pub mod transport;

pub use error::{Category, Error, Result};
