//! Pulse-level simulation of two transmon qutrits coupled through a
//! frequency-tunable coupler.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod gates;
pub mod linalg;
pub mod model;
pub mod numerics;
pub mod spectrum;
pub mod tomography;

pub use error::{Result, SimError};
