pub mod attention;
pub mod config;
pub mod error;
pub mod geometry;
pub mod model;

pub use lara_tensor as tensor;
pub mod synthdata;
pub mod train;
pub mod analysis;
pub mod cli;
