//! Differentiable 2D real-input FFT over the two trailing axes.
//!
//! Spectra are stored as Hermitian half-grids (W/2+1 columns) so that the
//! inverse transform is exactly real by construction, even for spectra
//! assembled from modified amplitude/phase pairs.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::linalg::concat;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Batch of Hermitian half-spectra. The wrapped tensor has shape
/// (..., H, W/2+1, 2) with real/imaginary parts interleaved on the last
/// axis; `height`/`width` are the originating spatial dims.
#[derive(Clone, Debug)]
pub struct ComplexHalfSpectrum<T: Scalar> {
    tensor: Tensor<T>,
    height: usize,
    width: usize,
}

fn half_cols(w: usize) -> usize {
    w / 2 + 1
}

/// Unscaled in-place 2D FFT over an H x W complex grid (rows then cols).
fn fft2_inplace<T: Scalar>(grid: &mut [Complex<T>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<T>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    for r in 0..h {
        row_fft.process(&mut grid[r * w..(r + 1) * w]);
    }
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for cidx in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + cidx];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            grid[r * w + cidx] = col[r];
        }
    }
}

/// Forward half-spectrum transform of one real H x W slice.
fn rfft2_slice<T: Scalar>(x: &[T], h: usize, w: usize, out: &mut [T]) {
    let wh = half_cols(w);
    let mut grid: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft2_inplace(&mut grid, h, w, false);
    for u in 0..h {
        for v in 0..wh {
            let c = grid[u * w + v];
            out[(u * wh + v) * 2] = c.re;
            out[(u * wh + v) * 2 + 1] = c.im;
        }
    }
}

/// Embed a half-spectrum gradient into a full grid with zeros at dropped
/// positions, then apply the unscaled inverse transform; the real part is
/// the adjoint of `rfft2_slice`.
fn rfft2_adjoint_slice<T: Scalar>(g: &[T], h: usize, w: usize, out: &mut [T]) {
    let wh = half_cols(w);
    let mut grid = vec![Complex::new(T::zero(), T::zero()); h * w];
    for u in 0..h {
        for v in 0..wh {
            grid[u * w + v] = Complex::new(g[(u * wh + v) * 2], g[(u * wh + v) * 2 + 1]);
        }
    }
    fft2_inplace(&mut grid, h, w, true);
    for (o, c) in out.iter_mut().zip(&grid) {
        *o = c.re;
    }
}

/// Real inverse of a half-spectrum slice. Special columns (v = 0 and the
/// Nyquist column for even W) are Hermitian-symmetrized so the output is
/// real for arbitrary spectra, and exact for genuine ones.
fn irfft2_slice<T: Scalar>(s: &[T], h: usize, w: usize, out: &mut [T]) {
    let wh = half_cols(w);
    let at = |u: usize, v: usize| Complex::new(s[(u * wh + v) * 2], s[(u * wh + v) * 2 + 1]);
    let mut grid = vec![Complex::new(T::zero(), T::zero()); h * w];
    let half = T::cast(0.5);
    for u in 0..h {
        let um = (h - u) % h;
        for v in 0..wh {
            let special = v == 0 || (w % 2 == 0 && v == w / 2);
            grid[u * w + v] = if special {
                (at(u, v) + at(um, v).conj()) * half
            } else {
                at(u, v)
            };
        }
        for v in wh..w {
            grid[u * w + v] = at(um, w - v).conj();
        }
    }
    fft2_inplace(&mut grid, h, w, true);
    let scale = T::one() / T::cast((h * w) as f64);
    for (o, c) in out.iter_mut().zip(&grid) {
        *o = c.re * scale;
    }
}

/// Adjoint of `irfft2_slice`: forward transform of the output gradient,
/// scaled by the Hermitian multiplicity of each stored column.
fn irfft2_adjoint_slice<T: Scalar>(g: &[T], h: usize, w: usize, out: &mut [T]) {
    let wh = half_cols(w);
    let mut grid: Vec<Complex<T>> = g.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft2_inplace(&mut grid, h, w, false);
    let inv = T::one() / T::cast((h * w) as f64);
    let two = T::cast(2.0);
    for u in 0..h {
        for v in 0..wh {
            let special = v == 0 || (w % 2 == 0 && v == w / 2);
            let c = if special { inv } else { two * inv };
            out[(u * wh + v) * 2] = grid[u * w + v].re * c;
            out[(u * wh + v) * 2 + 1] = grid[u * w + v].im * c;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Real 2D FFT over the last two axes; returns the non-redundant
    /// half-spectrum. Gradient is the adjoint transform.
    pub fn rfft2(&self) -> Result<ComplexHalfSpectrum<T>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch(
                "rfft2 requires at least 2 dimensions".into(),
            ));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h < 2 || w < 2 {
            return Err(Error::InvalidArgument(format!(
                "rfft2 requires spatial extents >= 2, got {}x{}",
                h, w
            )));
        }
        let wh = half_cols(w);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let x = Arc::clone(self.data_arc());
        let mut out = vec![T::zero(); batch * h * wh * 2];
        for b in 0..batch {
            rfft2_slice(
                &x[b * h * w..(b + 1) * h * w],
                h,
                w,
                &mut out[b * h * wh * 2..(b + 1) * h * wh * 2],
            );
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([h, wh, 2]);
        let backward = Box::new(move |g: &[T]| {
            let mut dx = vec![T::zero(); batch * h * w];
            for b in 0..batch {
                rfft2_adjoint_slice(
                    &g[b * h * wh * 2..(b + 1) * h * wh * 2],
                    h,
                    w,
                    &mut dx[b * h * w..(b + 1) * h * w],
                );
            }
            vec![dx]
        });
        let tensor = Tensor::record(out, out_shape, self.tape().cloned(), &[self], backward);
        Ok(ComplexHalfSpectrum {
            tensor,
            height: h,
            width: w,
        })
    }
}

impl<T: Scalar> ComplexHalfSpectrum<T> {
    /// Wrap an interleaved (..., H, W/2+1, 2) tensor as a spectrum batch.
    pub fn from_tensor(tensor: Tensor<T>, height: usize, width: usize) -> Result<Self> {
        let s = tensor.shape();
        let ok = s.len() >= 3
            && s[s.len() - 1] == 2
            && s[s.len() - 2] == half_cols(width)
            && s[s.len() - 3] == height;
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "spectrum tensor {:?} inconsistent with {}x{}",
                s, height, width
            )));
        }
        Ok(ComplexHalfSpectrum {
            tensor,
            height,
            width,
        })
    }

    /// Assemble a spectrum from separate real/imaginary tensors of shape
    /// (..., H, W/2+1).
    pub fn from_re_im(re: &Tensor<T>, im: &Tensor<T>, height: usize, width: usize) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::ShapeMismatch("re/im shape mismatch".into()));
        }
        let mut s = re.shape().to_vec();
        s.push(1);
        let re1 = re.reshape(&s)?;
        let im1 = im.reshape(&s)?;
        let t = concat(&[&re1, &im1], s.len() - 1)?;
        Self::from_tensor(t, height, width)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn part(&self, idx: usize) -> Tensor<T> {
        let rank = self.tensor.shape().len();
        let sliced = self.tensor.narrow(rank - 1, idx, 1).expect("valid slice");
        let target: Vec<usize> = self.tensor.shape()[..rank - 1].to_vec();
        sliced.reshape(&target).expect("valid reshape")
    }

    pub fn re(&self) -> Tensor<T> {
        self.part(0)
    }

    pub fn im(&self) -> Tensor<T> {
        self.part(1)
    }

    /// |z| with an epsilon guard keeping gradients finite at z = 0.
    pub fn amplitude(&self) -> Tensor<T> {
        let re = self.re();
        let im = self.im();
        re.square()
            .add(&im.square())
            .expect("same shape")
            .add_scalar(T::cast(1e-12))
            .sqrt()
    }

    /// arg(z), wrapped to [-pi, pi].
    pub fn phase(&self) -> Tensor<T> {
        self.im().atan2(&self.re()).expect("same shape")
    }

    /// Rebuild a spectrum from polar components: z = A * exp(iP).
    pub fn from_polar(
        amplitude: &Tensor<T>,
        phase: &Tensor<T>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let re = amplitude.mul(&phase.cos())?;
        let im = amplitude.mul(&phase.sin())?;
        Self::from_re_im(&re, &im, height, width)
    }

    /// Inverse transform back to a real (..., H, W) tensor.
    pub fn irfft2(&self, height: usize, width: usize) -> Result<Tensor<T>> {
        if height != self.height || width != self.width {
            return Err(Error::ShapeMismatch(format!(
                "spectrum is for {}x{}, requested {}x{}",
                self.height, self.width, height, width
            )));
        }
        let (h, w) = (self.height, self.width);
        let wh = half_cols(w);
        let s_shape = self.tensor.shape().to_vec();
        let batch: usize = s_shape[..s_shape.len() - 3].iter().product();
        let s = Arc::clone(self.tensor.data_arc());
        let mut out = vec![T::zero(); batch * h * w];
        for b in 0..batch {
            irfft2_slice(
                &s[b * h * wh * 2..(b + 1) * h * wh * 2],
                h,
                w,
                &mut out[b * h * w..(b + 1) * h * w],
            );
        }
        let mut out_shape = s_shape[..s_shape.len() - 3].to_vec();
        out_shape.extend([h, w]);
        let backward = Box::new(move |g: &[T]| {
            let mut ds = vec![T::zero(); batch * h * wh * 2];
            for b in 0..batch {
                irfft2_adjoint_slice(
                    &g[b * h * w..(b + 1) * h * w],
                    h,
                    w,
                    &mut ds[b * h * wh * 2..(b + 1) * h * wh * 2],
                );
            }
            vec![ds]
        });
        Ok(Tensor::record(
            out,
            out_shape,
            self.tensor.tape().cloned(),
            &[&self.tensor],
            backward,
        ))
    }
}
