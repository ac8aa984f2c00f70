#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod decoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heads;
pub mod metrics;
pub mod scene;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod tokens;
pub mod trainer;

pub use error::{Error, Result};
