//! Token-mixer-free MetaFormer backbones.
//!
//! The crate trains a pooling-mixer teacher and an affine-mixer student,
//! distills one into the other with block-wise module imitation, folds the
//! student's affine mixers into their preceding norms for deployment, and
//! measures the result.

pub mod analysis;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod imitation;
pub mod model;
pub mod reparam;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
