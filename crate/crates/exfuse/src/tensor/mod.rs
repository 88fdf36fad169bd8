//! Dense 4-D tensors, the autodiff graph and the differentiable op set.
//!
//! Data lives in `f64` buffers regardless of the precision mode. In
//! [`Precision::Single`] every op output is rounded through `f32`, so results
//! are exactly representable in 32 bits (which keeps checkpoints bit-exact)
//! while the kernels stay a single code path.

mod conv;
mod graph;
pub mod gradcheck;
mod ops;
mod optim;
#[cfg(test)]
pub(crate) mod reference;

pub(crate) use ops::{flip_w_raw, unshuffle_raw};

pub use graph::{Graph, Precision};
pub use ops::BnState;
pub use optim::Sgd;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Label value excluded from losses and evaluation.
pub const IGNORE_LABEL: u8 = 255;

/// Shape of a dense 4-D tensor in (batch, channel, height, width) order.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat index of `(n, c, h, w)` in row-major order.
    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

struct TensorInner {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// A dense 4-D array with an optional gradient buffer.
///
/// `Tensor` is a cheap handle (`Rc`) onto shared storage; ops create fresh
/// tensors and record how to backpropagate onto their operands. A tensor
/// participates in differentiation when `requires_grad` is set, either
/// directly (parameters) or transitively (op outputs).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for shape {}", data.len(), shape),
            ));
        }
        Ok(Self::new(shape, data, false))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new(shape, vec![0.0; shape.numel()], false)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self::new(shape, vec![value; shape.numel()], false)
    }

    /// A trainable leaf. Values are rounded through `f32` so parameters are
    /// representable in the checkpoint format in either precision mode.
    pub fn param(shape: Shape, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "param",
                format!("{} values for shape {}", data.len(), shape),
            ));
        }
        for v in &mut data {
            *v = *v as f32 as f64;
        }
        Ok(Self::new(shape, data, true))
    }

    pub(crate) fn new(shape: Shape, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                data,
                grad: None,
                requires_grad,
            })),
        }
    }

    pub fn shape(&self) -> Shape {
        self.inner.borrow().shape
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Borrow the data buffer.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |t| t.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        let b = self.inner.borrow();
        debug_assert_eq!(b.data.len(), 1);
        b.data[0]
    }

    /// Overwrite the data buffer in place; the shape is unchanged.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        let mut b = self.inner.borrow_mut();
        if data.len() != b.data.len() {
            return Err(Error::shape(
                "set_data",
                format!("{} values for shape {}", data.len(), b.shape),
            ));
        }
        b.data.copy_from_slice(data);
        Ok(())
    }

    /// Mutate one element; test and gradient-check helper.
    pub fn nudge(&self, idx: usize, delta: f64) {
        self.inner.borrow_mut().data[idx] += delta;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut b = self.inner.borrow_mut();
        debug_assert_eq!(g.len(), b.data.len());
        match &mut b.grad {
            Some(buf) => {
                for (a, &v) in buf.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => b.grad = Some(g.to_vec()),
        }
    }

    /// Remove and return the gradient; backward uses this so intermediate
    /// buffers are freed as the tape unwinds and repeated passes accumulate
    /// only into leaves.
    pub(crate) fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow_mut().grad.take()
    }

    /// Apply the optimizer update in place: the closure sees (data, grad).
    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64], Option<&[f64]>)) {
        let mut b = self.inner.borrow_mut();
        let TensorInner { data, grad, .. } = &mut *b;
        f(data.as_mut_slice(), grad.as_deref());
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={}, requires_grad={})",
            b.shape, b.requires_grad
        )
    }
}

/// Integer class labels for a batch, `(n, h, w)`, values in
/// `[0, classes) ∪ {IGNORE_LABEL}`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Labels {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Labels {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape(
                "labels",
                format!("{} values for ({n}, {h}, {w})", data.len()),
            ));
        }
        Ok(Labels { n, h, w, data })
    }

    #[inline]
    pub fn at(&self, n: usize, h: usize, w: usize) -> u8 {
        self.data[(n * self.h + h) * self.w + w]
    }
}
