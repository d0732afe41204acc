//! Central finite-difference verification of analytic gradients.

use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with step `h`, per coordinate:
/// |analytic - cd| / max(|analytic|, |cd|, 1e-8).
///
/// `f` must be smooth at `x`; pick inputs bounded away from ReLU/abs
/// kinks, or pass a mask via [`finite_diff_check_masked`] to skip
/// kink-adjacent coordinates.
pub fn finite_diff_check<T, F>(f: F, x: &[T], shape: &[usize], h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>, &Tape<T>) -> Result<Tensor<T>>,
{
    finite_diff_check_masked(f, x, shape, h, |_| true)
}

/// As [`finite_diff_check`], checking only coordinates where `mask(i)` holds.
pub fn finite_diff_check_masked<T, F, M>(
    f: F,
    x: &[T],
    shape: &[usize],
    h: f64,
    mask: M,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tensor<T>, &Tape<T>) -> Result<Tensor<T>>,
    M: Fn(usize) -> bool,
{
    let tape = Tape::new();
    let leaf = Tensor::leaf(x.to_vec(), shape, &tape)?;
    let loss = f(&leaf, &tape)?;
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    let grads = tape.backward(&loss)?;
    let analytic = grads
        .get(&leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![T::zero(); x.len()]);

    let eval = |pt: &[T]| -> Result<f64> {
        let t = Tape::new();
        let leaf = Tensor::leaf(pt.to_vec(), shape, &t)?;
        Ok(f(&leaf, &t)?.item().as_f64())
    };

    let hs = T::cast(h);
    let mut max_err = 0.0f64;
    let mut pt = x.to_vec();
    for i in 0..x.len() {
        if !mask(i) {
            continue;
        }
        let orig = pt[i];
        pt[i] = orig + hs;
        let fp = eval(&pt)?;
        pt[i] = orig - hs;
        let fm = eval(&pt)?;
        pt[i] = orig;
        let cd = (fp - fm) / (2.0 * h);
        let a = analytic[i].as_f64();
        let err = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
