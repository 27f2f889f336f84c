//! Localized defect modes in high-contrast periodic media.

pub mod bessel;
pub mod beta;
pub mod defect;
pub mod epsilon;
pub mod error;
pub mod fem;
pub mod geometry;
pub mod homogenize;
pub mod inclusion;

pub use error::{Error, Result};
