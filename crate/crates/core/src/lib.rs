//! Cooperative source separation and delay-constrained binaural enhancement.
//!
//! A room-scale microphone array separates the sources and estimates their
//! second-order statistics; each listening device then designs a causal,
//! delay-constrained multichannel Wiener filter for its own microphones from
//! those statistics.
//!
//! Pipeline: [`room`] renders a scene, [`separation`] estimates reference
//! signals, [`stats`] turns them into lag-domain correlations, [`enhance`]
//! designs and applies the remixing filters and [`metrics`] scores them.
//! [`pipeline`] wires the stages together for the CLI.

pub mod artifact;
pub mod dsp;
pub mod enhance;
pub mod error;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod room;
pub mod separation;
pub mod signal;
pub mod speech;
pub mod stats;
pub mod stft;
pub mod toeplitz;
pub mod wav;

pub use error::{Error, Result};
pub use signal::{fir_apply, FirFilter, MultichannelSignal};
pub use stft::{istft, stft, StftConfig, StftTensor};
