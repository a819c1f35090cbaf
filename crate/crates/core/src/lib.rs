//! Dynamical systems reconstruction from convolved observations.
//!
//! A piecewise-linear latent RNN is trained with generalized teacher forcing
//! on series observed through a hemodynamic-style convolution. Control
//! signals are obtained by Wiener deconvolution of the observations.

pub mod benchmark;
pub mod config;
pub mod deconv;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod observation;
pub mod scaling;
pub mod training;

pub use dynamics::{LatentTrajectory, ModelParams, Variant};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use observation::{canonical_hrf, causal_convolve, ConvDecoder, DecoderMode, HrfFilter, LinearDecoder};
