//! Cascaded single-stage detector on synthetic scenes.
//!
//! A small RetinaNet-style detector whose head is refined in stages: each
//! stage is trained against a stricter IoU threshold than the last, and a
//! feature consistency step re-samples the shared feature map with learned
//! offsets so later stages see features aligned with the boxes they refine.
//! Everything runs on the f64 tape in [`numerics`]; no external ML
//! dependencies.

pub mod assignment;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod verify;

pub use error::{Error, Result};
