//! Collaboration of experts (CoE).
//!
//! A lightweight *delegator* network produces a rough class prediction and an
//! expert-selection distribution for every sample. Confident samples exit
//! early with the rough prediction; the rest are grouped by selected expert
//! and refined in batches. Training couples the delegator and the experts
//! through two balanced-transportation problems:
//!
//! - [`lgm`] turns expert true-class probabilities into balanced one-hot
//!   selection labels that supervise the expert selector.
//! - [`wgm`] partitions each mini-batch by the selector's probabilities and
//!   turns the partition into per-expert loss weights.
//!
//! Both problems are solved by the row-penalty Vogel approximation in
//! [`transport`]. The neural-network pieces in [`nn`] are small dense MLPs
//! with hand-written backpropagation; [`models`] assembles them into the
//! delegator and experts, [`train`] runs the two-phase protocol plus the
//! baselines, and [`infer`] implements thresholded early exit with analytic
//! compute accounting.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod infer;
pub mod lgm;
pub mod matrix;
pub mod models;
pub mod nn;
pub mod seed;
pub mod train;
pub mod transport;
pub mod wgm;

pub use error::{Error, Result};
pub use matrix::Matrix;
