//! Heart sound (phonocardiogram) classification toolkit.
//!
//! Recordings are denoised with a wavelet shrinkage, segmented into heart
//! cycles with a duration-explicit HSMM, and classified either from 116
//! hand-crafted cycle statistics with classical learners or by a segmental
//! 1-D CNN whose per-cycle decisions are voted into a recording label.

pub mod baselines;
pub mod cli;
pub mod denoise;
pub mod dsp;
pub mod error;
pub mod features;
pub mod metrics;
pub mod neuralnet;
pub mod pipeline;
pub mod segmental;
pub mod segmenter;
pub mod signal_io;
pub mod synthgen;

pub use error::{Error, Result};
