//! Shape manipulation, matmul and layer normalization.

use std::sync::Arc;

use super::{joint_tape_many, numel_of, Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            )));
        }
        let backward = Box::new(move |g: &[T]| vec![g.to_vec()]);
        Ok(Tensor::record(
            self.data().to_vec(),
            shape.to_vec(),
            self.tape().cloned(),
            &[self],
            backward,
        ))
    }

    /// Contiguous slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow({}, {}, {}) out of range for {:?}",
                axis, start, len, shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let alen = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = self.data();
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let n = self.numel();
        let backward = Box::new(move |g: &[T]| {
            let mut dg = vec![T::zero(); n];
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                dg[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![dg]
        });
        Ok(Tensor::record(
            out,
            out_shape,
            self.tape().cloned(),
            &[self],
            backward,
        ))
    }

    /// Swap the two trailing axes (copying).
    pub fn transpose_last2(&self) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch("transpose needs rank >= 2".into()));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = numel_of(&shape[..shape.len() - 2]);
        let src = self.data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let backward = Box::new(move |g: &[T]| {
            let mut dg = vec![T::zero(); g.len()];
            for b in 0..batch {
                let base = b * r * c;
                for i in 0..r {
                    for j in 0..c {
                        dg[base + i * c + j] = g[base + j * r + i];
                    }
                }
            }
            vec![dg]
        });
        Ok(Tensor::record(
            out,
            out_shape,
            self.tape().cloned(),
            &[self],
            backward,
        ))
    }

    /// Matrix product: 2D (M,K)x(K,N) or batched 3D with equal batch dims.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(Error::ShapeMismatch(format!(
                        "matmul inner dims differ: {:?} x {:?}",
                        sa, sb
                    )));
                }
                (1usize, sa[0], sa[1], sb[1])
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(Error::ShapeMismatch(format!(
                        "batched matmul mismatch: {:?} x {:?}",
                        sa, sb
                    )));
                }
                (sa[0], sa[1], sa[2], sb[2])
            }
            _ => {
                return Err(Error::ShapeMismatch(
                    "matmul supports 2D or equal-batch 3D operands".into(),
                ))
            }
        };
        let tape = self.joint_tape(other)?;
        let a = Arc::clone(self.data_arc());
        let b = Arc::clone(other.data_arc());
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            T::gemm_acc(
                m,
                k,
                n,
                T::one(),
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let out_shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let backward = Box::new(move |g: &[T]| {
            // dA = G * B^T, dB = A^T * G (per batch)
            let mut da = vec![T::zero(); a.len()];
            let mut db = vec![T::zero(); b.len()];
            for bi in 0..batch {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                let asl = &a[bi * m * k..(bi + 1) * m * k];
                let bsl = &b[bi * k * n..(bi + 1) * k * n];
                // dA[i,j] = sum_n G[i,n] * B[j,n] -> gemm with B transposed
                let bt = transpose(bsl, k, n);
                T::gemm_acc(m, n, k, T::one(), gs, &bt, &mut da[bi * m * k..(bi + 1) * m * k]);
                let at = transpose(asl, m, k);
                T::gemm_acc(k, m, n, T::one(), &at, gs, &mut db[bi * k * n..(bi + 1) * k * n]);
            }
            vec![da, db]
        });
        Ok(Tensor::record(out, out_shape, tape, &[self, other], backward))
    }

    /// Layer normalization over the channel axis (axis 1) of an
    /// (N, C, ...) tensor, with learned per-channel scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch("layer_norm needs rank >= 2".into()));
        }
        let c = shape[1];
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm scale/shift must have {} entries",
                c
            )));
        }
        let outer = shape[0];
        let inner: usize = shape[2..].iter().product();
        let eps = T::cast(1e-6);
        let x = Arc::clone(self.data_arc());
        let gm = Arc::clone(gamma.data_arc());
        let mut out = vec![T::zero(); x.len()];
        let mut mu_buf = vec![T::zero(); outer * inner];
        let mut sig_buf = vec![T::zero(); outer * inner];
        let cn = T::cast(c as f64);
        for o in 0..outer {
            for i in 0..inner {
                let at = |ch: usize| (o * c + ch) * inner + i;
                let mut mu = T::zero();
                for ch in 0..c {
                    mu = mu + x[at(ch)];
                }
                mu = mu / cn;
                let mut var = T::zero();
                for ch in 0..c {
                    let d = x[at(ch)] - mu;
                    var = var + d * d;
                }
                let sig = (var / cn + eps).sqrt();
                mu_buf[o * inner + i] = mu;
                sig_buf[o * inner + i] = sig;
                for ch in 0..c {
                    out[at(ch)] = gm[ch] * (x[at(ch)] - mu) / sig + beta.data()[ch];
                }
            }
        }
        let tape = joint_tape_many(&[self, gamma, beta])?;
        let mu_buf = Arc::new(mu_buf);
        let sig_buf = Arc::new(sig_buf);
        let backward = Box::new(move |g: &[T]| {
            let mut dx = vec![T::zero(); x.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |ch: usize| (o * c + ch) * inner + i;
                    let mu = mu_buf[o * inner + i];
                    let sig = sig_buf[o * inner + i];
                    // dL/dxhat, plus the mean/variance path
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for ch in 0..c {
                        let xhat = (x[at(ch)] - mu) / sig;
                        let dxhat = g[at(ch)] * gm[ch];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgamma[ch] = dgamma[ch] + g[at(ch)] * xhat;
                        dbeta[ch] = dbeta[ch] + g[at(ch)];
                    }
                    for ch in 0..c {
                        let xhat = (x[at(ch)] - mu) / sig;
                        let dxhat = g[at(ch)] * gm[ch];
                        dx[at(ch)] =
                            (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / cn) / sig;
                    }
                }
            }
            vec![dx, dgamma, dbeta]
        });
        Ok(Tensor::record(
            out,
            shape,
            tape,
            &[self, gamma, beta],
            backward,
        ))
    }
}

fn transpose<T: Scalar>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = m[i * cols + j];
        }
    }
    out
}

/// Concatenate tensors along `axis`. All other dims must agree.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("concat of zero tensors".into()));
    }
    let rank = xs[0].shape().len();
    if axis >= rank {
        return Err(Error::InvalidArgument(format!(
            "concat axis {} out of range",
            axis
        )));
    }
    for x in xs {
        if x.shape().len() != rank {
            return Err(Error::ShapeMismatch("concat rank mismatch".into()));
        }
        for d in 0..rank {
            if d != axis && x.shape()[d] != xs[0].shape()[d] {
                return Err(Error::ShapeMismatch(format!(
                    "concat dim {} mismatch: {:?} vs {:?}",
                    d,
                    x.shape(),
                    xs[0].shape()
                )));
            }
        }
    }
    let outer: usize = xs[0].shape()[..axis].iter().product();
    let inner: usize = xs[0].shape()[axis + 1..].iter().product();
    let lens: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (x, &l) in xs.iter().zip(&lens) {
            let src = x.data();
            out.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut out_shape = xs[0].shape().to_vec();
    out_shape[axis] = total;
    let tape = joint_tape_many(xs)?;
    let sizes: Vec<usize> = lens.iter().map(|&l| l * inner).collect();
    let backward = Box::new(move |g: &[T]| {
        let mut parts: Vec<Vec<T>> = sizes.iter().map(|&s| vec![T::zero(); outer * s]).collect();
        let row = total * inner;
        for o in 0..outer {
            let mut off = 0;
            for (p, &s) in parts.iter_mut().zip(&sizes) {
                p[o * s..(o + 1) * s].copy_from_slice(&g[o * row + off..o * row + off + s]);
                off += s;
            }
        }
        parts
    });
    Ok(Tensor::record(out, out_shape, tape, xs, backward))
}
