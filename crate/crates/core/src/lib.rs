//! Rubric-based short-answer scoring with few-shot chain-of-thought prompts
//! and a human-in-the-loop active-learning loop.

pub mod active;
pub mod digest;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod model;
pub mod irr;
pub mod prompt;
pub mod report;
pub mod sampling;
pub mod storage;
