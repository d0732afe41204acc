//! Reductions and softmax. Accumulation order is fixed (row-major
//! sequential) so results are bit-deterministic.

use std::sync::Arc;

use super::{numel_of, Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tensor<T> {
    /// Sum of all elements, row-major order.
    pub fn sum(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        let n = self.numel();
        let backward = Box::new(move |g: &[T]| vec![vec![g[0]; n]]);
        Tensor::record(
            vec![acc],
            vec![1],
            self.tape().cloned(),
            &[self],
            backward,
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::cast(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Sum of |x| over all elements.
    pub fn l1_norm(&self) -> Tensor<T> {
        self.abs().sum()
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&self) -> Tensor<T> {
        self.square().sum().sqrt()
    }

    /// Sum along one axis, keeping it as a singleton dimension.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape().len() {
            return Err(Error::InvalidArgument(format!(
                "axis {} out of range for shape {:?}",
                axis,
                self.shape()
            )));
        }
        if self.shape()[axis] == 0 {
            return Err(Error::InvalidArgument("empty reduction axis".into()));
        }
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = 1;
        let mut out = vec![T::zero(); outer * inner];
        let src = self.data();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] = out[obase + i] + src[base + i];
                }
            }
        }
        let n = self.numel();
        let backward = Box::new(move |g: &[T]| {
            let mut dg = vec![T::zero(); n];
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    for i in 0..inner {
                        dg[base + i] = g[o * inner + i];
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

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let n = T::cast(self.shape()[axis] as f64);
        Ok(self.sum_axis(axis)?.scale(T::one() / n))
    }

    /// Global average pool over the two trailing spatial dims of an
    /// (N, C, H, W) tensor, producing (N, C, 1, 1).
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        if self.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "global_avg_pool expects 4D, got {:?}",
                self.shape()
            )));
        }
        if self.shape()[2] == 0 || self.shape()[3] == 0 {
            return Err(Error::InvalidArgument("empty spatial extent".into()));
        }
        self.sum_axis(3)?
            .sum_axis(2)
            .map(|t| t.scale(T::one() / T::cast((self.shape()[2] * self.shape()[3]) as f64)))
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape().len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {} out of range for {:?}",
                axis,
                self.shape()
            )));
        }
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let src = self.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut m = src[at(0)];
                for k in 1..len {
                    m = m.max(src[at(k)]);
                }
                let mut z = T::zero();
                for k in 0..len {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    z = z + e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let y = Arc::new(out.clone());
        let backward = Box::new(move |g: &[T]| {
            // dx = y * (g - sum(g*y)) along the softmax axis
            let mut dg = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let mut dot = T::zero();
                    for k in 0..len {
                        dot = dot + g[at(k)] * y[at(k)];
                    }
                    for k in 0..len {
                        dg[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![dg]
        });
        Ok(Tensor::record(
            out,
            self.shape().to_vec(),
            self.tape().cloned(),
            &[self],
            backward,
        ))
    }
}

/// Decompose a shape around `axis` into (outer, axis_len, inner).
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}
