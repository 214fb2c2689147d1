//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to [`Var`]s that descend from a
//! parameter leaf. Each record keeps the values its adjoint rule needs;
//! [`Tape::backward`] walks the records once in reverse order and accumulates
//! gradients additively across fan-out.
//!
//! Values live in the `Var`s, not on the tape, so a tape created with
//! [`Tape::no_grad`] runs the exact same code path without retaining anything.

mod check;
mod ops;

use std::cell::{Cell, RefCell};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

pub use check::{gradient_check, gradient_check_components, gradient_check_with, GradCheckReport, Stencil};

/// Floating-point scalar usable by every module: `f32` for training, `f64`
/// for verification.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn cast(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Relative residual at which the pressure solve stops by default.
    fn default_cg_tolerance() -> f64;

    /// `C ← α·A·B + β·C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Every index reachable through the given shapes and strides must be in
    /// bounds for the corresponding pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn cast(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn default_cg_tolerance() -> f64 {
        1e-6
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn cast(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn default_cg_tolerance() -> f64 {
        1e-12
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided view of a matrix stored in a slice.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
        }
    }
}

/// `C ← α·A·B + β·C` for a row-major `C` of shape `A.rows × B.cols`.
pub fn gemm<T: Real>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!(a.max_index() < a.data.len() && b.max_index() < b.data.len(), "gemm operand out of bounds");
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Immutable dense array with a shape. Cloning shares the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::new(data) })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: Arc::new(vec![value; shape.iter().product()]) }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::cast(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&x| f(x)).collect()) }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|x| U::cast(x.as_f64())).collect()) }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Adjoint rule: given the output gradient and which inputs need a gradient,
/// returns one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    name: &'static str,
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of primitive operations. Confined to one thread.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    first_non_finite: Cell<Option<&'static str>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: true, first_non_finite: Cell::new(None) }
    }

    /// A tape that never records: forward values only.
    pub fn no_grad() -> Self {
        Self { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Name of the first primitive that produced a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite.get()
    }

    /// A differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        let node = self.recording.then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node { name: "leaf", inputs: Vec::new(), backward: None });
            nodes.len() - 1
        });
        Var { tape: self, node, value }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var { tape: self, node: None, value }
    }

    /// Records a primitive. Used by the built-in operations and by modules that
    /// supply their own adjoints (convolution, for instance).
    pub fn op<'t>(
        &'t self,
        name: &'static str,
        inputs: &[&Var<'t, T>],
        value: Tensor<T>,
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Var<'t, T> {
        if self.first_non_finite.get().is_none() && !value.all_finite() {
            self.first_non_finite.set(Some(name));
        }
        let tracked = self.recording && inputs.iter().any(|v| v.node.is_some());
        let node = tracked.then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                name,
                inputs: inputs.iter().map(|v| v.node).collect(),
                backward: Some(Box::new(backward)),
            });
            nodes.len() - 1
        });
        Var { tape: self, node, value }
    }

    /// Reverse sweep from a scalar `loss`. Gradients are retained for leaves.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            return Err(Error::NonScalarLoss { len: loss.value.len() });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let Some(root) = loss.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(vec![T::one()]);
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "adjoint arity of `{}`", node.name);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(i), Some(ig)) = (input, ig) {
                    match &mut grads[*i] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                        slot => *slot = Some(ig),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: &Var<'_, T>) -> Tensor<T> {
        match var.node.and_then(|id| self.grads.get(id)).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(var.value.shape.clone(), g.clone()),
            None => Tensor::zeros(var.value.shape()),
        }
    }

    /// Moves the gradient of a leaf out of the map.
    pub fn take(&mut self, var: &Var<'_, T>) -> Vec<T> {
        var.node
            .and_then(|id| self.grads.get_mut(id))
            .and_then(Option::take)
            .unwrap_or_else(|| vec![T::zero(); var.value.len()])
    }
}

/// A tensor value with an optional handle into a tape.
#[derive(Clone)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    node: Option<usize>,
    value: Tensor<T>,
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> T {
        self.value.item()
    }
}

impl<T: Real> Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("node", &self.node).field("shape", &self.value.shape).finish()
    }
}
