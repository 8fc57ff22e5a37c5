//! Stacked contextual hourglass network for semantic segmentation.
//!
//! The crate carries everything needed to train and evaluate the network on
//! CPU: a small reverse-mode autodiff engine ([`autodiff`]), convolutional
//! layers ([`nn`]), the residual encoding layer ([`encoding`]), the stacked
//! network ([`hourglass`]), the data pipeline ([`data`]), the training
//! engine ([`train`]) and segmentation metrics ([`metrics`]).

pub mod autodiff;
mod binio;
pub mod data;
pub mod encoding;
pub mod error;
pub mod gradcheck;
pub mod hourglass;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Record, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
pub use rng::SplitMix64;
