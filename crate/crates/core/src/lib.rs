//! Design and evaluation of zero-delay analog multiple-description mappings.
//!
//! A Gaussian source is encoded by two real-valued mappings `g1`, `g2` whose
//! outputs travel over independent AWGN channels. Each channel fails with
//! probability `ε`; the receiver uses a side decoder when one description
//! arrives and a central decoder when both do. Mappings are designed by
//! deterministic annealing against MMSE decoders and compared with linear
//! encoding and the information-theoretic bound.

pub mod annealer;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod decoders;
mod engine;
pub mod error;
pub mod exec;
pub mod io;
pub mod md2to1;
pub mod numerics;
pub mod opta;
pub mod system;

pub use error::{Error, Result};
