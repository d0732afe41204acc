//! Minimal dense tensor with reverse-mode automatic differentiation.
//!
//! Tensors are immutable after creation. Differentiable computation is
//! recorded on a [`Tape`]; each recorded node stores its parents and a
//! backward closure returning one gradient buffer per parent. A single
//! reverse sweep over the tape visits every node exactly once.

mod conv;
mod elementwise;
mod fft;
mod linalg;
mod reduce;

pub mod check;

pub use fft::ComplexHalfSpectrum;
pub use linalg::concat;

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type for tensors: f32 for training, f64 for verification oracles.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + rustfft::FftNum
    + Default
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C += alpha * A (m x k, row-major) * B (k x n, row-major).
    /// Result layout is row-major m x n; accumulation into existing C.
    fn gemm_acc(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], c: &mut [Self]);

    /// C = alpha * A * B + beta * C with explicit row/column strides per
    /// operand, so transposed views need no copies.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn cast(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn gemm_acc(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], c: &mut [f32]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    fn cast(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm_acc(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], c: &mut [f64]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Vec<T>>>;

struct Node<T: Scalar> {
    parents: Vec<usize>,
    /// Maps the gradient w.r.t. this node's output to gradient
    /// contributions for each parent, in `parents` order.
    backward: BackwardFn<T>,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Recording tape for reverse-mode differentiation. Confined to one thread.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, parents: Vec<usize>, backward: BackwardFn<T>) -> usize {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        debug_assert!(parents.iter().all(|&p| p < id));
        inner.nodes.push(Node { parents, backward });
        id
    }

    fn same_as(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// for shared subexpressions. The tape is consumed; re-record to
    /// differentiate again.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape.clone()));
        }
        let loss_node = loss.node.ok_or_else(|| {
            Error::InvalidArgument("loss is not on the tape (requires_grad=false)".into())
        })?;
        {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(Error::TapeConsumed);
            }
            inner.consumed = true;
        }
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; inner.nodes.len()];
        grads[loss_node] = Some(vec![T::one()]);
        for id in (0..=loss_node).rev() {
            let g = match grads[id].as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &inner.nodes[id];
            if node.parents.is_empty() {
                continue;
            }
            let contribs = (node.backward)(&g);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (&p, c) in node.parents.iter().zip(contribs) {
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(c) {
                            *a = *a + v;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. a tensor recorded on the tape. `None` if the tensor
    /// did not influence the loss or was not recorded.
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        let node = t.node?;
        self.grads.get(node)?.as_deref()
    }
}

/// Dense n-dimensional array with optional tape participation.
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<usize>,
    tape: Option<Tape<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: self.node,
            tape: self.tape.clone(),
        }
    }
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor{{shape: {:?}, grad: {}}}",
            self.shape,
            self.node.is_some()
        )
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Constant tensor (not recorded on any tape).
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
            tape: None,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(vec![v], &[1]).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![T::zero(); numel_of(shape)], shape).unwrap()
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor::from_vec(vec![v; numel_of(shape)], shape).unwrap()
    }

    /// Differentiated leaf: recorded on the tape so [`Gradients::get`]
    /// can retrieve its gradient after backward.
    pub fn leaf(data: Vec<T>, shape: &[usize], tape: &Tape<T>) -> Result<Self> {
        let mut t = Tensor::from_vec(data, shape)?;
        t.node = Some(tape.push(Vec::new(), Box::new(|_| Vec::new())));
        t.tape = Some(tape.clone());
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Same values, detached from any tape.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            tape: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub(crate) fn tape(&self) -> Option<&Tape<T>> {
        self.tape.as_ref()
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<T>> {
        &self.data
    }

    /// Resolve the common tape of two operands, erroring on mixed tapes.
    pub(crate) fn joint_tape(&self, other: &Tensor<T>) -> Result<Option<Tape<T>>> {
        match (&self.tape, &other.tape) {
            (Some(a), Some(b)) => {
                if a.same_as(b) {
                    Ok(Some(a.clone()))
                } else {
                    Err(Error::TapeMismatch)
                }
            }
            (Some(a), None) => Ok(Some(a.clone())),
            (None, Some(b)) => Ok(Some(b.clone())),
            (None, None) => Ok(None),
        }
    }

    /// Record a new tensor derived from `parents`. Parents without a node
    /// are constants and receive no gradient.
    pub(crate) fn record(
        data: Vec<T>,
        shape: Vec<usize>,
        tape: Option<Tape<T>>,
        parents: &[&Tensor<T>],
        backward: BackwardFn<T>,
    ) -> Tensor<T> {
        debug_assert_eq!(numel_of(&shape), data.len());
        let mut out = Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            tape: None,
        };
        if let Some(tape) = tape {
            let parent_ids: Vec<usize> = parents.iter().filter_map(|p| p.node).collect();
            if !parent_ids.is_empty() {
                // Track which parents are differentiated so the backward
                // closure's full output can be filtered down to them.
                let mask: Vec<bool> = parents.iter().map(|p| p.node.is_some()).collect();
                let filtered: BackwardFn<T> = Box::new(move |g| {
                    backward(g)
                        .into_iter()
                        .zip(&mask)
                        .filter_map(|(c, &keep)| keep.then_some(c))
                        .collect()
                });
                out.node = Some(tape.push(parent_ids, filtered));
                out.tape = Some(tape);
            }
        }
        out
    }
}

/// Multi-way tape resolution for variadic ops (concat).
pub(crate) fn joint_tape_many<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Option<Tape<T>>> {
    let mut found: Option<Tape<T>> = None;
    for x in xs {
        if let Some(t) = x.tape() {
            match &found {
                Some(f) if !f.same_as(t) => return Err(Error::TapeMismatch),
                Some(_) => {}
                None => found = Some(t.clone()),
            }
        }
    }
    Ok(found)
}
