//! Zero-shot demographic inference from stay-point trajectories.
//!
//! The pipeline turns per-agent stay points into weekly natural-language
//! narratives, runs a three-stage reasoning chain against a chat-completion
//! backend, parses the structured final answer and scores it against labels.

pub mod backend;
pub mod category;
pub mod chain;
pub mod experiment;
pub mod metrics;
pub mod narrative;
pub mod parser;
pub mod synth;
pub mod template;
pub mod trajectory;

pub use category::{Attribute, Category, CategoryConfig, CategoryId, CategorySet};
