//! Dense row-major tensors with a dynamic reverse-mode autodiff graph.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) to a node holding data, an optional
//! gradient slot and, for values produced by differentiable operations, the
//! closure that maps the output gradient back onto the inputs. Graphs are
//! built only when at least one input requires a gradient and gradient
//! recording is enabled (see [`no_grad`]).

mod autograd;
mod conv;
mod gemm;
pub(crate) mod loss;
mod nn;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use conv::{conv2d, conv_output_size};
pub use gemm::matmul;
pub use loss::{softmax_cross_entropy, sq_l2_sum};
pub use nn::{batch_norm2d, global_avg_pool, linear, relu};

/// Element type of a tensor. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided matrices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    /// Per-thread pool of reusable scratch buffers for kernels.
    #[doc(hidden)]
    fn scratch_pool() -> &'static std::thread::LocalKey<RefCell<Vec<Vec<Self>>>>;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

thread_local! {
    static SCRATCH_F32: RefCell<Vec<Vec<f32>>> = const { RefCell::new(Vec::new()) };
    static SCRATCH_F64: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// A buffer of at least `len` elements with unspecified contents.
pub(crate) fn take_scratch<S: Scalar>(len: usize) -> Vec<S> {
    let mut v = S::scratch_pool().with(|p| p.borrow_mut().pop()).unwrap_or_default();
    if v.len() < len {
        v.resize(len, S::zero());
    }
    v
}

pub(crate) fn return_scratch<S: Scalar>(v: Vec<S>) {
    S::scratch_pool().with(|p| {
        let mut pool = p.borrow_mut();
        if pool.len() < 4 {
            pool.push(v);
        }
    });
}

impl Scalar for f32 {
    fn scratch_pool() -> &'static std::thread::LocalKey<RefCell<Vec<Vec<f32>>>> {
        &SCRATCH_F32
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        // SAFETY: `gemm::matmul` validated that every strided access of a, b
        // and the row-major m x n output stays inside the slices.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

impl Scalar for f64 {
    fn scratch_pool() -> &'static std::thread::LocalKey<RefCell<Vec<Vec<f64>>>> {
        &SCRATCH_F64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Maps the output gradient to one optional gradient per input. The second
/// argument says which inputs actually need one.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S], &[bool]) -> Vec<Option<Vec<S>>>>;

pub(crate) struct GradFn<S: Scalar> {
    pub(crate) name: &'static str,
    pub(crate) inputs: Vec<Tensor<S>>,
    pub(crate) backward: BackwardFn<S>,
}

struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: Cell<bool>,
    grad_fn: Option<GradFn<S>>,
}

/// Handle to a dense tensor. Cloning shares the underlying storage.
pub struct Tensor<S: Scalar = f32> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Self {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.node.data.borrow();
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad.get());
        if let Some(g) = &self.node.grad_fn {
            d.field("grad_fn", &g.name);
        }
        if data.len() <= 16 {
            d.field("data", &*data);
        }
        d.finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    fn from_node(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, grad_fn: Option<GradFn<S>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                grad_fn,
            }),
        }
    }

    /// Builds a constant tensor; fails if `data.len()` disagrees with `shape`.
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} holds {} elements, data has {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::from_node(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn parameter(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.node.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::from_node(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: S) -> Self {
        Self::from_node(Vec::new(), vec![value], false, None)
    }

    /// Result of a differentiable op. Records `backward` only when some
    /// input requires a gradient and recording is enabled.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        name: &'static str,
        inputs: &[&Tensor<S>],
        backward: impl Fn(&[S], &[bool]) -> Vec<Option<Vec<S>>> + 'static,
    ) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Self::from_node(shape, data, false, None);
        }
        let grad_fn = GradFn {
            name,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        };
        Self::from_node(shape, data, true, Some(grad_fn))
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.borrow().len()
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.node.data.borrow()
    }

    /// Mutable access to the storage. Only meaningful for leaves (parameters,
    /// running statistics); graph nodes captured by a pending backward read
    /// their inputs lazily.
    pub fn data_mut(&self) -> RefMut<'_, Vec<S>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        let d = self.node.data.borrow();
        assert_eq!(d.len(), 1, "item() on a tensor with {} elements", d.len());
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    /// Toggles gradient tracking on a leaf. Turning it off drops any stored
    /// gradient.
    pub fn set_requires_grad(&self, on: bool) {
        self.node.requires_grad.set(on);
        if !on {
            self.node.grad.borrow_mut().take();
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.node.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        self.node.grad.borrow_mut().take();
    }

    pub(crate) fn accumulate_grad(&self, g: &[S]) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.node.id
    }

    /// Constant copy without graph lineage.
    pub fn detach(&self) -> Self {
        Self::from_node(self.node.shape.clone(), self.to_vec(), false, None)
    }

    /// Elementwise conversion to another scalar type (no lineage).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| T::from_f64_lossy(v.as_f64())).collect();
        Tensor::from_node(self.node.shape.clone(), data, false, None)
    }

    pub(crate) fn grad_fn(&self) -> Option<&GradFn<S>> {
        self.node.grad_fn.as_ref()
    }
}

/// Dimensions of an NCHW tensor, with a descriptive error otherwise.
pub(crate) fn dims4<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected NCHW rank-4 input, got shape {s:?}"))),
    }
}
