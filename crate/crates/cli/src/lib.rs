//! Command-line and HTTP front ends for rubric-loop experiments.
//!
//! [`ops`] holds every pipeline operation; the `rubric-loop` binary and the
//! [`service`] router are thin adapters over it, so each mutation is
//! reachable from both.

pub mod ops;
pub mod service;
