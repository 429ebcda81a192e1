//! Face anonymization by rotating a disentangled identity code on the unit
//! sphere.
//!
//! An encoder splits a face into a spatial content code and a unit identity
//! vector. Rotating the identity vector by an angle `alpha` larger than the
//! recognizer's threshold angle `theta` and decoding gives a face the
//! recognizer no longer matches, with pose, expression and background kept.
//!
//! Start with [`geometry`] for the sphere operations, [`training::train`] for a
//! run, [`anonymizer`] for inference and [`evaluation::evaluate`] for the
//! protocols. The `examples/` directory has one program per capability.

pub mod adapters;
pub mod anonymizer;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod frames;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod recognizer;
pub mod service;
pub mod sprites;
pub mod training;

pub use error::{Error, Result};
