//! Evaluation metrics: PSNR and single-scale SSIM. Plain scalar
//! computations over tensor data; not differentiable and not taped.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 10 * log10(peak^2 / MSE); +infinity when the images are identical.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "psnr shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut total = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let dy = i as f64 - half;
            let dx = j as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            total += v;
        }
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Standard single-scale SSIM with an 11x11 Gaussian window (sigma 1.5),
/// C1 = (0.01 * peak)^2, C2 = (0.03 * peak)^2, valid-region windows only,
/// averaged over channels and batch. Accepts (H, W), (C, H, W), or
/// (N, C, H, W).
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ssim shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let rank = a.shape().len();
    if rank < 2 {
        return Err(Error::ShapeMismatch("ssim needs at least 2-D input".into()));
    }
    let h = a.shape()[rank - 2];
    let w = a.shape()[rank - 1];
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs spatial dims >= {}, got {}x{}",
            SSIM_WINDOW, h, w
        )));
    }
    let peak = 1.0;
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let win = gaussian_window();
    let planes = a.numel() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let base = p * h * w;
        let xa = &a.data()[base..base + h * w];
        let xb = &b.data()[base..base + h * w];
        let mut plane_sum = 0.0;
        let mut count = 0usize;
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let (mut m1, mut m2, mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let g = win[i * SSIM_WINDOW + j];
                        let va = xa[(oy + i) * w + ox + j].as_f64();
                        let vb = xb[(oy + i) * w + ox + j].as_f64();
                        m1 += g * va;
                        m2 += g * vb;
                        s11 += g * va * va;
                        s22 += g * vb * vb;
                        s12 += g * va * vb;
                    }
                }
                let var1 = s11 - m1 * m1;
                let var2 = s22 - m2 * m2;
                let cov = s12 - m1 * m2;
                let val = ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2))
                    / ((m1 * m1 + m2 * m2 + c1) * (var1 + var2 + c2));
                plane_sum += val;
                count += 1;
            }
        }
        total += plane_sum / count as f64;
    }
    Ok(total / planes as f64)
}
