//! Desk-scale decoder distillation for a DETR-style detector.
//!
//! The crate trains a small transformer detector on deterministic synthetic
//! scenes, exposes per-layer attention weight maps, and distills a student
//! from a frozen teacher via adaptive/fixed matching and prediction,
//! self-attention, and cross-attention losses.

pub mod boxes;
pub mod eval;
pub mod grad;
pub mod losses;
pub mod matchers;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scenes;
pub mod train;
