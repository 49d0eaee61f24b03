//! Contrastive knowledge transfer from a frozen teacher CNN to a smaller
//! student CNN.
//!
//! The crate is self-contained: [`tensor`] provides a small reverse-mode
//! autodiff engine, [`model`] the teacher/student networks with activation
//! taps, [`projection`] and [`contrastive`] the embedding heads and
//! contrastive objectives, [`losses`] the supervised and distillation terms,
//! [`mapping`] the teacher/student layer pairing, [`data`] the datasets, and
//! [`harness`] the optimizer, training loops and experiment plumbing.

pub mod contrastive;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod mapping;
pub mod model;
pub mod projection;
pub mod tensor;

pub use error::{Error, Result};
