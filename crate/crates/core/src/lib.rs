// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod analysis;
pub mod config;
pub mod datagen;
pub mod error;
pub mod interp;
pub mod llm;
pub mod model;
pub mod optim;
pub mod plot;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
