//! Robust relative representations, parameter-space symmetries of MLPs,
//! zero-dimensional persistence and zero-shot model stitching.

pub mod batching;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod model;
pub mod stitching;
pub mod symmetry;
pub mod topology;
pub mod verify;

pub use error::{Error, Result};
