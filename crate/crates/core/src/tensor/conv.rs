//! 2D convolution (cross-correlation), transposed convolution and
//! bilinear sampling. Heavy paths use im2col + gemm, parallel across the
//! batch; per-sample work is sequential so results are bit-deterministic.

use std::sync::Arc;

use rayon::prelude::*;

use super::{joint_tape_many, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

fn conv_dims(
    xs: &[usize],
    ws: &[usize],
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<ConvDims> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects 4D input and weight, got {:?} and {:?}",
            xs, ws
        )));
    }
    if stride < 1 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || wcin != cin / groups {
        return Err(Error::ShapeMismatch(format!(
            "channel/group mismatch: input {} channels, weight {:?}, groups {}",
            cin, ws, groups
        )));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::InvalidArgument(format!(
            "kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
        groups,
    })
}

/// Valid output-column range [j0, j1) for kernel column `kj` at stride 1,
/// plus the matching first source column.
fn stride1_col_range(d: ConvDims, kj: usize) -> (usize, usize, usize) {
    let j0 = d.pad.saturating_sub(kj).min(d.ow);
    let j1 = (d.w + d.pad).saturating_sub(kj).min(d.ow).max(j0);
    // saturate: when [j0, j1) is empty the source column is never read
    let sj0 = (j0 + kj).saturating_sub(d.pad);
    (j0, j1, sj0)
}

/// Unfold one sample's group into a (cin_g*kh*kw) x (oh*ow) matrix.
fn im2col<T: Scalar>(x: &[T], d: ConvDims, g: usize, col: &mut [T]) {
    let cin_g = d.cin / d.groups;
    let l = d.oh * d.ow;
    for c in 0..cin_g {
        let plane = &x[(g * cin_g + c) * d.h * d.w..(g * cin_g + c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut col[row * l..(row + 1) * l];
                if d.stride == 1 {
                    // rows become slice copies with zeroed borders
                    let (j0, j1, sj0) = stride1_col_range(d, kj);
                    for oi in 0..d.oh {
                        let ii = (oi + ki) as isize - d.pad as isize;
                        let drow = &mut dst[oi * d.ow..(oi + 1) * d.ow];
                        if ii < 0 || ii >= d.h as isize {
                            for v in drow.iter_mut() {
                                *v = T::zero();
                            }
                            continue;
                        }
                        let src = &plane[ii as usize * d.w..(ii as usize + 1) * d.w];
                        for v in &mut drow[..j0] {
                            *v = T::zero();
                        }
                        if j1 > j0 {
                            drow[j0..j1].copy_from_slice(&src[sj0..sj0 + (j1 - j0)]);
                        }
                        for v in &mut drow[j1..] {
                            *v = T::zero();
                        }
                    }
                } else {
                    for oi in 0..d.oh {
                        let ii = (oi * d.stride + ki) as isize - d.pad as isize;
                        for oj in 0..d.ow {
                            let jj = (oj * d.stride + kj) as isize - d.pad as isize;
                            dst[oi * d.ow + oj] = if ii >= 0
                                && ii < d.h as isize
                                && jj >= 0
                                && jj < d.w as isize
                            {
                                plane[ii as usize * d.w + jj as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter a column matrix back into one sample's group (adjoint of im2col).
fn col2im<T: Scalar>(col: &[T], d: ConvDims, g: usize, x: &mut [T]) {
    let cin_g = d.cin / d.groups;
    let l = d.oh * d.ow;
    for c in 0..cin_g {
        let plane = &mut x[(g * cin_g + c) * d.h * d.w..(g * cin_g + c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &col[row * l..(row + 1) * l];
                if d.stride == 1 {
                    let (j0, j1, sj0) = stride1_col_range(d, kj);
                    if j1 == j0 {
                        continue;
                    }
                    for oi in 0..d.oh {
                        let ii = (oi + ki) as isize - d.pad as isize;
                        if ii < 0 || ii >= d.h as isize {
                            continue;
                        }
                        let dst =
                            &mut plane[ii as usize * d.w + sj0..ii as usize * d.w + sj0 + (j1 - j0)];
                        let srow = &src[oi * d.ow + j0..oi * d.ow + j1];
                        for (a, &v) in dst.iter_mut().zip(srow) {
                            *a = *a + v;
                        }
                    }
                } else {
                    for oi in 0..d.oh {
                        let ii = (oi * d.stride + ki) as isize - d.pad as isize;
                        if ii < 0 || ii >= d.h as isize {
                            continue;
                        }
                        for oj in 0..d.ow {
                            let jj = (oj * d.stride + kj) as isize - d.pad as isize;
                            if jj < 0 || jj >= d.w as isize {
                                continue;
                            }
                            let idx = ii as usize * d.w + jj as usize;
                            plane[idx] = plane[idx] + src[oi * d.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Grouped 2D cross-correlation. Input (N, Cin, H, W), weight
    /// (Cout, Cin/groups, kh, kw), optional bias (Cout). Output spatial
    /// size is floor((in + 2*pad - k)/stride) + 1.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let d = conv_dims(self.shape(), weight.shape(), stride, pad, groups)?;
        if let Some(b) = bias {
            if b.numel() != d.cout {
                return Err(Error::ShapeMismatch(format!(
                    "bias has {} entries, expected {}",
                    b.numel(),
                    d.cout
                )));
            }
        }
        let x = Arc::clone(self.data_arc());
        let w = Arc::clone(weight.data_arc());
        let bdata = bias.map(|b| Arc::clone(b.data_arc()));
        let cin_g = d.cin / d.groups;
        let cout_g = d.cout / d.groups;
        let k = cin_g * d.kh * d.kw;
        let l = d.oh * d.ow;

        let sample = |n: usize| -> Vec<T> {
            let mut out = vec![T::zero(); d.cout * l];
            let xs = &x[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w];
            let mut col = vec![T::zero(); k * l];
            for g in 0..d.groups {
                im2col(xs, d, g, &mut col);
                T::gemm_acc(
                    cout_g,
                    k,
                    l,
                    T::one(),
                    &w[g * cout_g * k..(g + 1) * cout_g * k],
                    &col,
                    &mut out[g * cout_g * l..(g + 1) * cout_g * l],
                );
            }
            if let Some(b) = &bdata {
                for c in 0..d.cout {
                    let bv = b[c];
                    for v in &mut out[c * l..(c + 1) * l] {
                        *v = *v + bv;
                    }
                }
            }
            out
        };
        let per_sample: Vec<Vec<T>> = (0..d.n).into_par_iter().map(sample).collect();
        let mut out = Vec::with_capacity(d.n * d.cout * l);
        for s in per_sample {
            out.extend_from_slice(&s);
        }

        let tape = match bias {
            Some(b) => joint_tape_many(&[self, weight, b])?,
            None => self.joint_tape(weight)?,
        };
        let has_bias = bias.is_some();
        let wlen = w.len();
        let backward = Box::new(move |g: &[T]| {
            let results: Vec<(Vec<T>, Vec<T>)> = (0..d.n)
                .into_par_iter()
                .map(|n| {
                    let xs = &x[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w];
                    let gs = &g[n * d.cout * l..(n + 1) * d.cout * l];
                    let mut dx = vec![T::zero(); d.cin * d.h * d.w];
                    let mut dw = vec![T::zero(); wlen];
                    let mut col = vec![T::zero(); k * l];
                    let mut dcol = vec![T::zero(); k * l];
                    for gi in 0..d.groups {
                        im2col(xs, d, gi, &mut col);
                        let gsl = &gs[gi * cout_g * l..(gi + 1) * cout_g * l];
                        // dW_g += G * col^T, reading col transposed in place
                        T::gemm_strided(
                            cout_g,
                            l,
                            k,
                            T::one(),
                            gsl,
                            l as isize,
                            1,
                            &col,
                            1,
                            l as isize,
                            T::one(),
                            &mut dw[gi * cout_g * k..(gi + 1) * cout_g * k],
                            k as isize,
                            1,
                        );
                        // dcol = W^T * G, reading W transposed in place
                        T::gemm_strided(
                            k,
                            cout_g,
                            l,
                            T::one(),
                            &w[gi * cout_g * k..(gi + 1) * cout_g * k],
                            1,
                            k as isize,
                            gsl,
                            l as isize,
                            1,
                            T::zero(),
                            &mut dcol,
                            l as isize,
                            1,
                        );
                        col2im(&dcol, d, gi, &mut dx);
                    }
                    (dx, dw)
                })
                .collect();
            let mut dx = Vec::with_capacity(x.len());
            let mut dw_total = vec![T::zero(); wlen];
            for (dxn, dwn) in results {
                dx.extend_from_slice(&dxn);
                for (a, v) in dw_total.iter_mut().zip(dwn) {
                    *a = *a + v;
                }
            }
            let mut grads = vec![dx, dw_total];
            if has_bias {
                let mut db = vec![T::zero(); d.cout];
                for n in 0..d.n {
                    for c in 0..d.cout {
                        let base = (n * d.cout + c) * l;
                        for i in 0..l {
                            db[c] = db[c] + g[base + i];
                        }
                    }
                }
                grads.push(db);
            }
            grads
        });
        let out_shape = vec![d.n, d.cout, d.oh, d.ow];
        Ok(match bias {
            Some(b) => Tensor::record(out, out_shape, tape, &[self, weight, b], backward),
            None => Tensor::record(out, out_shape, tape, &[self, weight], backward),
        })
    }

    /// Transposed convolution (upsampling). Input (N, Cin, H, W), weight
    /// (Cin, Cout, kh, kw); output spatial size (in-1)*stride + k.
    pub fn transposed_conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
    ) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch(format!(
                "transposed_conv2d: input {:?}, weight {:?}",
                xs, ws
            )));
        }
        if stride < 1 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        if let Some(b) = bias {
            if b.numel() != cout {
                return Err(Error::ShapeMismatch("bias size mismatch".into()));
            }
        }
        let x = Arc::clone(self.data_arc());
        let wv = Arc::clone(weight.data_arc());
        let bdata = bias.map(|b| Arc::clone(b.data_arc()));
        let kk = cout * kh * kw;
        let hw = h * w;
        let per_sample: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let mut out = vec![T::zero(); cout * oh * ow];
                if let Some(b) = &bdata {
                    for c in 0..cout {
                        for v in &mut out[c * oh * ow..(c + 1) * oh * ow] {
                            *v = b[c];
                        }
                    }
                }
                let xs = &x[ni * cin * hw..(ni + 1) * cin * hw];
                // col = W^T (kk x cin, weight read transposed) * X (cin x hw)
                let mut col = vec![T::zero(); kk * hw];
                T::gemm_strided(
                    kk,
                    cin,
                    hw,
                    T::one(),
                    &wv,
                    1,
                    kk as isize,
                    xs,
                    hw as isize,
                    1,
                    T::zero(),
                    &mut col,
                    hw as isize,
                    1,
                );
                // scatter kernel taps into the strided output grid
                for co in 0..cout {
                    let op = &mut out[co * oh * ow..(co + 1) * oh * ow];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let crow = &col[((co * kh + ki) * kw + kj) * hw..][..hw];
                            for i in 0..h {
                                let mut idx = (i * stride + ki) * ow + kj;
                                for &v in &crow[i * w..(i + 1) * w] {
                                    op[idx] = op[idx] + v;
                                    idx += stride;
                                }
                            }
                        }
                    }
                }
                out
            })
            .collect();
        let mut out = Vec::with_capacity(n * cout * oh * ow);
        for s in per_sample {
            out.extend_from_slice(&s);
        }
        let tape = match bias {
            Some(b) => joint_tape_many(&[self, weight, b])?,
            None => self.joint_tape(weight)?,
        };
        let has_bias = bias.is_some();
        let wlen = wv.len();
        let backward = Box::new(move |g: &[T]| {
            // reading g with a (kh, kw, stride, pad 0) correlation window
            // yields exactly the taps the forward scatter wrote
            let gd = ConvDims {
                n,
                cin: cout,
                h: oh,
                w: ow,
                cout: cin,
                kh,
                kw,
                oh: h,
                ow: w,
                stride,
                pad: 0,
                groups: 1,
            };
            let results: Vec<(Vec<T>, Vec<T>)> = (0..n)
                .into_par_iter()
                .map(|ni| {
                    let gsl = &g[ni * cout * oh * ow..(ni + 1) * cout * oh * ow];
                    let xsl = &x[ni * cin * hw..(ni + 1) * cin * hw];
                    let mut colg = vec![T::zero(); kk * hw];
                    im2col(gsl, gd, 0, &mut colg);
                    // dX = W (cin x kk) * colg (kk x hw)
                    let mut dx = vec![T::zero(); cin * hw];
                    T::gemm_strided(
                        cin,
                        kk,
                        hw,
                        T::one(),
                        &wv,
                        kk as isize,
                        1,
                        &colg,
                        hw as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        hw as isize,
                        1,
                    );
                    // dW = X (cin x hw) * colg^T (hw x kk)
                    let mut dw = vec![T::zero(); wlen];
                    T::gemm_strided(
                        cin,
                        hw,
                        kk,
                        T::one(),
                        xsl,
                        hw as isize,
                        1,
                        &colg,
                        1,
                        hw as isize,
                        T::zero(),
                        &mut dw,
                        kk as isize,
                        1,
                    );
                    (dx, dw)
                })
                .collect();
            let mut dx = Vec::with_capacity(x.len());
            let mut dw_total = vec![T::zero(); wlen];
            for (dxn, dwn) in results {
                dx.extend_from_slice(&dxn);
                for (a, v) in dw_total.iter_mut().zip(dwn) {
                    *a = *a + v;
                }
            }
            let mut grads = vec![dx, dw_total];
            if has_bias {
                let mut db = vec![T::zero(); cout];
                for ni in 0..n {
                    for c in 0..cout {
                        let base = (ni * cout + c) * oh * ow;
                        for i in 0..oh * ow {
                            db[c] = db[c] + g[base + i];
                        }
                    }
                }
                grads.push(db);
            }
            grads
        });
        let out_shape = vec![n, cout, oh, ow];
        Ok(match bias {
            Some(b) => Tensor::record(out, out_shape, tape, &[self, weight, b], backward),
            None => Tensor::record(out, out_shape, tape, &[self, weight], backward),
        })
    }

    /// Sample (N, C, H, W) at positions displaced by a per-pixel flow
    /// (N, 2, H, W): channel 0 is the x-offset, channel 1 the y-offset.
    /// Out-of-bounds reads are zero. Differentiable w.r.t. both inputs.
    pub fn bilinear_sample(&self, flow: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = self.shape().to_vec();
        let fs = flow.shape();
        if xs.len() != 4 || fs.len() != 4 || fs[1] != 2 || fs[0] != xs[0] || fs[2] != xs[2] || fs[3] != xs[3] {
            return Err(Error::ShapeMismatch(format!(
                "bilinear_sample: input {:?}, flow {:?}",
                xs, fs
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let x = Arc::clone(self.data_arc());
        let f = Arc::clone(flow.data_arc());
        let read = move |x: &[T], ni: usize, ci: usize, yi: isize, xi: isize| -> T {
            if yi >= 0 && yi < h as isize && xi >= 0 && xi < w as isize {
                x[((ni * c + ci) * h + yi as usize) * w + xi as usize]
            } else {
                T::zero()
            }
        };
        let mut out = vec![T::zero(); n * c * h * w];
        for ni in 0..n {
            for yi in 0..h {
                for xi in 0..w {
                    let fx = f[((ni * 2) * h + yi) * w + xi];
                    let fy = f[((ni * 2 + 1) * h + yi) * w + xi];
                    let sx = T::cast(xi as f64) + fx;
                    let sy = T::cast(yi as f64) + fy;
                    let x0 = sx.floor();
                    let y0 = sy.floor();
                    let wx = sx - x0;
                    let wy = sy - y0;
                    let (x0, y0) = (x0.as_f64() as isize, y0.as_f64() as isize);
                    for ci in 0..c {
                        let v00 = read(&x, ni, ci, y0, x0);
                        let v01 = read(&x, ni, ci, y0, x0 + 1);
                        let v10 = read(&x, ni, ci, y0 + 1, x0);
                        let v11 = read(&x, ni, ci, y0 + 1, x0 + 1);
                        let top = v00 * (T::one() - wx) + v01 * wx;
                        let bot = v10 * (T::one() - wx) + v11 * wx;
                        out[((ni * c + ci) * h + yi) * w + xi] =
                            top * (T::one() - wy) + bot * wy;
                    }
                }
            }
        }
        let tape = self.joint_tape(flow)?;
        let backward = Box::new(move |g: &[T]| {
            let mut dx = vec![T::zero(); x.len()];
            let mut df = vec![T::zero(); f.len()];
            for ni in 0..n {
                for yi in 0..h {
                    for xi in 0..w {
                        let fx = f[((ni * 2) * h + yi) * w + xi];
                        let fy = f[((ni * 2 + 1) * h + yi) * w + xi];
                        let sx = T::cast(xi as f64) + fx;
                        let sy = T::cast(yi as f64) + fy;
                        let x0f = sx.floor();
                        let y0f = sy.floor();
                        let wx = sx - x0f;
                        let wy = sy - y0f;
                        let (x0, y0) = (x0f.as_f64() as isize, y0f.as_f64() as isize);
                        let mut dfx = T::zero();
                        let mut dfy = T::zero();
                        for ci in 0..c {
                            let gv = g[((ni * c + ci) * h + yi) * w + xi];
                            let v00 = read(&x, ni, ci, y0, x0);
                            let v01 = read(&x, ni, ci, y0, x0 + 1);
                            let v10 = read(&x, ni, ci, y0 + 1, x0);
                            let v11 = read(&x, ni, ci, y0 + 1, x0 + 1);
                            // scatter into dx at in-bounds corners
                            let mut put = |yy: isize, xx: isize, wgt: T| {
                                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                    let idx =
                                        ((ni * c + ci) * h + yy as usize) * w + xx as usize;
                                    dx[idx] = dx[idx] + gv * wgt;
                                }
                            };
                            put(y0, x0, (T::one() - wx) * (T::one() - wy));
                            put(y0, x0 + 1, wx * (T::one() - wy));
                            put(y0 + 1, x0, (T::one() - wx) * wy);
                            put(y0 + 1, x0 + 1, wx * wy);
                            dfx = dfx
                                + gv * ((T::one() - wy) * (v01 - v00) + wy * (v11 - v10));
                            dfy = dfy
                                + gv * ((T::one() - wx) * (v10 - v00) + wx * (v11 - v01));
                        }
                        df[((ni * 2) * h + yi) * w + xi] =
                            df[((ni * 2) * h + yi) * w + xi] + dfx;
                        df[((ni * 2 + 1) * h + yi) * w + xi] =
                            df[((ni * 2 + 1) * h + yi) * w + xi] + dfy;
                    }
                }
            }
            vec![dx, df]
        });
        Ok(Tensor::record(
            out,
            vec![n, c, h, w],
            tape,
            &[self, flow],
            backward,
        ))
    }
}
