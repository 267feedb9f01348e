//! Command-line tools and HTTP service for the facerig retargeting engine.

pub mod cli;
pub mod project;
pub mod server;
