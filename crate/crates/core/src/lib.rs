//! Expression retargeting engine: morphable face model, landmark fitter,
//! character rigs, dataset generation, the expression-to-blendweight adapter,
//! animation tracks and human-in-the-loop preference editing.

pub mod adapter;
pub mod animation;
pub mod datagen;
pub mod error;
pub mod fitter;
pub mod hitl;
pub mod io;
pub mod model;
pub mod rig;

pub use error::{Error, Result};
