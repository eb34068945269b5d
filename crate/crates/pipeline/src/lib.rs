//! Std side of the fact-check pipeline: configuration, LM and verifier
//! clients, the run store, experiment runners, reports, and the annotation API.

pub mod api;
pub mod arm;
pub mod config;
pub mod error;
pub mod lm_client;
pub mod report;
pub mod runner;
pub mod scorer;
pub mod store;
pub mod table;

pub use error::{Error, Result};
