//! Learning good teacher matters: knowledge distillation where the teacher
//! learns from the student's feedback.
//!
//! The crate contains a small tape-based autodiff engine, MLP classifiers,
//! distillation losses, distillation influence (exact and finite-difference),
//! the vanilla / online / meta / LGTM training loops, data utilities and
//! metrics.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod influence;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod trainers;

pub use error::{Error, Result};
