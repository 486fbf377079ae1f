//! Vision inference former on a toy multimodal decoder.

pub mod analysis;
pub mod attention;
pub mod config;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod synthgrid;
pub mod tensor;
pub mod trainer;
pub mod vif;

pub use error::{Result, VifError};
