//! Frequency-domain arbitrary-scale image super-resolution.
//!
//! The pipeline works on 8x8 block DCT spectra of a bicubic-upsampled
//! luminance image: a trainable block transform ([`dct`]), a one-step
//! actor-critic that picks how many leading zigzag coefficients of each block
//! to keep ([`sfd`]), a scale-conditioned network that recovers the remaining
//! high-frequency coefficients ([`sfr`]), and the joint training loop
//! ([`train`]). [`analysis`] holds the spectral degradation statistics that
//! motivate the action range, [`eval`] the metrics and inference driver.

pub mod analysis;
pub mod autograd;
pub mod config;
pub mod data;
pub mod dct;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod params;
pub mod plot;
pub mod sfd;
pub mod sfr;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use config::Config;
pub use dct::{BasisSet, SpectralMap};
pub use error::{Error, Result};
pub use model::FreqSr;
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

/// Lowest supported magnification.
pub const MIN_SCALE: f64 = 1.1;
/// Highest supported magnification.
pub const MAX_SCALE: f64 = 4.0;

/// Rejects scale factors outside `[MIN_SCALE, MAX_SCALE]`.
pub fn check_scale(r: f64) -> Result<()> {
    if r.is_finite() && (MIN_SCALE - 1e-9..=MAX_SCALE + 1e-9).contains(&r) {
        Ok(())
    } else {
        Err(Error::Scale(r))
    }
}
