//! Compositional attribute-object recognition with attributes modeled as
//! linear operators acting on object prototype vectors.
//!
//! The crate provides the model (`model`), hand-derived gradients for the
//! training objective (`losses`), an Adam trainer with finite-difference
//! verification (`training`), open/closed-world evaluation and retrieval
//! (`evaluation`), and dataset/checkpoint I/O plus a planted-model synthetic
//! generator (`data`).

pub mod data;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod training;
