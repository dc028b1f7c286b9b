//! Grouped single shot multibox detection for multi-phase CT volumes.
//!
//! The crate is layered bottom-up: [`tensor`] provides the autodiff engine,
//! [`priors`] the box geometry, [`model`] the grouped SSD network, [`loss`] the
//! multibox objective, [`data`] the volume pipeline and phantoms, [`train`]
//! the optimiser loop and checkpoints, [`eval`] detection and scoring, and
//! [`run`] the key=value run configuration.

pub mod tensor;
pub mod priors;
pub mod model;
pub mod loss;
pub mod config;
pub mod data;
pub mod train;
pub mod eval;
pub mod run;
