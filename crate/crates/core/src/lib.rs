//! Tote-handling fulfillment simulator, heuristics and exact oracle.

pub mod bench;
pub mod bq;
pub mod domain;
pub mod gen;
pub mod heuristics;
pub mod oracle;
pub mod server;
pub mod sim;

pub use domain::*;
