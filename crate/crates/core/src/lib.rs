//! Carve a trained classifier into a mixture of interpretable experts plus a
//! residual, explain each expert with logic rules over concepts, and use those
//! rules to find, remove and re-check shortcut features.

pub mod carve;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod folx;
pub mod hashing;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod shortcut;

pub use error::{Error, Result};
