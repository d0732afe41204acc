//! Amplitude/phase decomposition and spatial-frequency negative synthesis.
//!
//! A real image channel is split into a half-grid amplitude and phase.
//! Amplitude carries brightness statistics (the DC term is the image mean
//! times H*W); phase carries structure. Negatives for contrastive training
//! are built by interpolating amplitudes in frequency space and blending
//! the two phase-carriers back in image space.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Polar form of the half-spectrum of a real image stack `(..., H, W)`.
/// Amplitude is nonnegative at creation but may go negative after
/// extrapolating interpolation; `reconstruct` treats a negative entry as a
/// pi phase flip, so no clamping is needed anywhere.
pub struct AmpPhase<T: Scalar> {
    pub amplitude: Tensor<T>,
    pub phase: Tensor<T>,
    pub height: usize,
    pub width: usize,
}

/// One synthesized contrastive negative together with the draw that made it.
pub struct NegativeSample<T: Scalar> {
    pub image: Tensor<T>,
    pub lambda_amp: T,
    /// Content hashes of the (input, target) pair the sample came from.
    pub provenance: (u64, u64),
}

fn content_id<T: Scalar>(t: &Tensor<T>) -> u64 {
    let mut h = DefaultHasher::new();
    t.shape().hash(&mut h);
    for v in t.data() {
        v.as_f64().to_bits().hash(&mut h);
    }
    h.finish()
}

pub fn decompose<T: Scalar>(x: &Tensor<T>) -> Result<AmpPhase<T>> {
    let s = x.rfft2()?;
    let rank = x.shape().len();
    Ok(AmpPhase {
        amplitude: s.amplitude(),
        phase: s.phase(),
        height: x.shape()[rank - 2],
        width: x.shape()[rank - 1],
    })
}

/// irfft2 of `amplitude * exp(i*phase)`; exactly real by construction.
fn reconstruct_polar<T: Scalar>(
    amplitude: &Tensor<T>,
    phase: &Tensor<T>,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let spec = crate::tensor::ComplexHalfSpectrum::from_polar(amplitude, phase, height, width)?;
    spec.irfft2(height, width)
}

pub fn reconstruct<T: Scalar>(ap: &AmpPhase<T>) -> Result<Tensor<T>> {
    if ap.amplitude.shape() != ap.phase.shape() {
        return Err(Error::ShapeMismatch(format!(
            "amplitude {:?} vs phase {:?}",
            ap.amplitude.shape(),
            ap.phase.shape()
        )));
    }
    reconstruct_polar(&ap.amplitude, &ap.phase, ap.height, ap.width)
}

/// `(iFFT(P_x, A_y), iFFT(P_y, A_x))`: each output keeps one image's
/// structure and borrows the other's brightness distribution.
pub fn swap_amplitude<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "swap_amplitude shapes {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let dx = decompose(x)?;
    let dy = decompose(y)?;
    let a = reconstruct_polar(&dy.amplitude, &dx.phase, dx.height, dx.width)?;
    let b = reconstruct_polar(&dx.amplitude, &dy.phase, dy.height, dy.width)?;
    Ok((a, b))
}

/// `A_m = lambda * A_x + (1 - lambda) * A_y`, unclamped.
pub fn amp_interpolate<T: Scalar>(
    a_x: &Tensor<T>,
    a_y: &Tensor<T>,
    lambda_amp: T,
) -> Result<Tensor<T>> {
    if a_x.shape() != a_y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "amp_interpolate shapes {:?} vs {:?}",
            a_x.shape(),
            a_y.shape()
        )));
    }
    a_x.scale(lambda_amp)
        .add(&a_y.scale(T::one() - lambda_amp))
}

/// Blend the mixed amplitude through both phase carriers:
/// `(1-|l|) * iFFT(P_x, A_m) + |l| * iFFT(P_y, A_m)`.
pub fn make_negative<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    lambda_amp: T,
) -> Result<NegativeSample<T>> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "make_negative shapes {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let dx = decompose(x)?;
    let dy = decompose(y)?;
    let a_m = amp_interpolate(&dx.amplitude, &dy.amplitude, lambda_amp)?;
    let via_x = reconstruct_polar(&a_m, &dx.phase, dx.height, dx.width)?;
    let via_y = reconstruct_polar(&a_m, &dy.phase, dy.height, dy.width)?;
    let w = lambda_amp.abs();
    let image = via_x.scale(T::one() - w).add(&via_y.scale(w))?;
    Ok(NegativeSample {
        image,
        lambda_amp,
        provenance: (content_id(x), content_id(y)),
    })
}

/// K fresh draws of lambda_amp ~ U(-1, 1), one negative per draw.
pub fn sample_negatives<T: Scalar, R: Rng>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    k: usize,
    rng: &mut R,
) -> Result<Vec<NegativeSample<T>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    (0..k)
        .map(|_| {
            let lambda = T::cast(rng.gen_range(-1.0..1.0));
            make_negative(x, y, lambda)
        })
        .collect()
}
