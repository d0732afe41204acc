//! Elementwise unary/binary operations with singleton-dimension broadcasting.

use std::sync::Arc;

use super::{numel_of, Scalar, Tensor};
use crate::error::{Error, Result};

/// Broadcast result shape for two same-rank shapes; dims must match or be 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "broadcast requires equal rank, got {:?} vs {:?}",
            a, b
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(Error::ShapeMismatch(format!(
                    "cannot broadcast {:?} with {:?}",
                    a, b
                )))
            }
        })
        .collect()
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides into `shape` when broadcast to `out_shape` (0 on expanded dims).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let base = strides_for(shape);
    shape
        .iter()
        .zip(out_shape)
        .zip(base)
        .map(|((&d, &o), s)| if d == o { s } else { 0 })
        .collect()
}

/// Visit every output element in row-major order, passing the linear
/// indices into the two broadcast sources. Odometer walk: no index
/// tables, one counter bump per element amortized.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let n = numel_of(out_shape);
    if n == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut counters = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        f(ia, ib);
        for d in (0..rank).rev() {
            counters[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counters[d] < out_shape[d] {
                break;
            }
            counters[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn binary_op(
        &self,
        other: &Tensor<T>,
        f: impl Fn(T, T) -> T,
        // (a, b, out, grad) -> (da, db) contributions per element
        dfa: impl Fn(T, T, T) -> T + 'static,
        dfb: impl Fn(T, T, T) -> T + 'static,
    ) -> Result<Tensor<T>> {
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let tape = self.joint_tape(other)?;
        let (a, b) = (Arc::clone(arc_of(self)), Arc::clone(arc_of(other)));
        let same = self.shape() == other.shape();
        let data: Vec<T> = if same {
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(self.shape(), &out_shape);
            let sb = broadcast_strides(other.shape(), &out_shape);
            let mut data = Vec::with_capacity(numel_of(&out_shape));
            for_each_broadcast(&out_shape, &sa, &sb, |x, y| data.push(f(a[x], b[y])));
            data
        };
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let os = out_shape.clone();
        let backward = Box::new(move |g: &[T]| {
            let stride_a = broadcast_strides(&sa, &os);
            let stride_b = broadcast_strides(&sb, &os);
            let mut da = vec![T::zero(); a.len()];
            let mut db = vec![T::zero(); b.len()];
            let mut i = 0usize;
            for_each_broadcast(&os, &stride_a, &stride_b, |ai, bi| {
                let gv = g[i];
                let (x, y) = (a[ai], b[bi]);
                da[ai] = da[ai] + dfa(x, y, gv);
                db[bi] = db[bi] + dfb(x, y, gv);
                i += 1;
            });
            vec![da, db]
        });
        Ok(Tensor::record(
            data,
            out_shape,
            tape,
            &[self, other],
            backward,
        ))
    }

    fn unary_op(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let a = Arc::clone(arc_of(self));
        let backward = Box::new(move |g: &[T]| {
            vec![g.iter().zip(a.iter()).map(|(&gv, &x)| gv * df(x)).collect()]
        });
        Tensor::record(
            data,
            self.shape().to_vec(),
            self.tape().cloned(),
            &[self],
            backward,
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_op(other, |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_op(other, |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_op(other, |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    /// Division. With gradients required, an exact-zero denominator is an
    /// error rather than a silent inf.
    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.joint_tape(other)?.is_some() && other.data().iter().any(|v| *v == T::zero()) {
            return Err(Error::DivisionByZero);
        }
        self.binary_op(
            other,
            |a, b| a / b,
            |_, b, g| g / b,
            |a, b, g| -g * a / (b * b),
        )
    }

    pub fn atan2(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        // self = y, other = x; denominator guarded near the origin.
        let eps = T::cast(1e-24);
        self.binary_op(
            other,
            |y, x| y.atan2(x),
            move |y, x, g| g * x / (x * x + y * y + eps),
            move |y, x, g| -g * y / (x * x + y * y + eps),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary_op(|x| -x, |_| -T::one())
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.unary_op(|x| x + s, |_| T::one())
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.unary_op(move |x| x * s, move |_| s)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary_op(
            |x| if x > T::zero() { x } else { T::zero() },
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        self.unary_op(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary_op(
            |x| T::one() / (T::one() + (-x).exp()),
            |x| {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() - s)
            },
        )
    }

    pub fn tanh_act(&self) -> Tensor<T> {
        self.unary_op(|x| x.tanh(), |x| T::one() - x.tanh() * x.tanh())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary_op(|x| x.exp(), |x| x.exp())
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary_op(
            |x| x.sqrt(),
            |x| {
                let half = T::cast(0.5);
                let s = x.sqrt();
                if s > T::zero() {
                    half / s
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary_op(
            |x| x.abs(),
            |x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary_op(|x| x * x, |x| T::cast(2.0) * x)
    }

    pub fn cos(&self) -> Tensor<T> {
        self.unary_op(|x| x.cos(), |x| -x.sin())
    }

    pub fn sin(&self) -> Tensor<T> {
        self.unary_op(|x| x.sin(), |x| x.cos())
    }

    pub fn clamp_to(&self, lo: T, hi: T) -> Tensor<T> {
        self.unary_op(
            move |x| x.max(lo).min(hi),
            move |x| {
                if x > lo && x < hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }
}

/// Internal accessor for the shared data buffer.
fn arc_of<T: Scalar>(t: &Tensor<T>) -> &Arc<Vec<T>> {
    t.data_arc()
}
