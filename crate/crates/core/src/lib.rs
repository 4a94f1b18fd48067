//! Cascaded channel estimation for IRS-assisted mmWave MIMO-OFDM links.
//!
//! The crate covers the whole pipeline: multipath channel synthesis
//! ([`channel`]), IRS training-phase design and element activation
//! ([`pilot`]), least-squares estimation ([`estimator`]), the two-stage
//! attention/denoising estimator and its training loop ([`network`]) and a
//! config-driven experiment harness ([`harness`]). Everything runs on the
//! small tensor engine in [`tensor`].

// `!(x > 0.0)` style guards are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod channel;
pub mod estimator;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod pilot;
