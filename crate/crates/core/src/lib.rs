//! Event-guided low-light image enhancement at desk scale.
//!
//! The pipeline has two stages: a Fourier-prior visibility restoration
//! network with amplitude-phase entanglement, and an event-guided
//! structure refinement network with dynamic multi-scale alignment.
//! Training uses a contrastive objective whose negative samples are
//! synthesized by spatial-frequency interpolation. Everything runs on a
//! minimal reverse-mode autodiff tensor core with a differentiable 2D
//! real FFT.

pub mod data;
pub mod error;
pub mod events;
pub mod fourier;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ComplexHalfSpectrum, Gradients, Scalar, Tape, Tensor};
