//! Hyperspectral single-image super-resolution with stripe-scanned
//! selective state space blocks and a Haar wavelet U-Net.

pub mod autodiff;
mod binio;
pub mod blocks;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod scan;
pub mod ssm;
pub mod wavelet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
