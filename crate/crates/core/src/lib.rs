//! Error-aware reasoning for LM credit classification.
//!
//! The crate is `no_std` (with `alloc`): it holds the pure parts of the
//! pipeline. Network clients, persistence and the CLI live in the
//! `factcheck` crate.
//!
//! - [`dataset`]: label-free preprocessing and balanced sampling
//! - [`prompts`]: generation, probe and refinement templates
//! - [`parser`]: decision and reasoning-point extraction
//! - [`gateway`]: stratified folds and leakage-checked verifier scores
//! - [`feedback`]: oracle, verifier and self-reflection channels, refinement rounds
//! - [`stats`]: association, detection and classification metrics
#![no_std]

extern crate alloc;

pub mod dataset;
pub mod feedback;
pub mod gateway;
pub mod parser;
pub mod prompts;
pub mod stats;

pub use dataset::{render_attributes, CaseRecord, Label};
pub use feedback::{Completer, FeedbackBundle, FeedbackSource, Granularity};
pub use parser::{Decision, Generation, ReasoningPoint};
pub use prompts::PromptSet;
