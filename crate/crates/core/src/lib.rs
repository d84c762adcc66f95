//! Desk-scale query-based semantic segmentation with semantic query
//! boosting, Fourier-domain text-driven feature restyling, and
//! synergy-weighted style losses, plus a synthetic multi-domain benchmark.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod fft;
pub mod nn;
pub mod pipeline;
pub mod prompts;
pub mod resample;
pub mod sqb;
pub mod sso;
pub mod tdst;

pub use error::{Error, Result};
