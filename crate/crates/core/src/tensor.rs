//! Dense row-major tensors over `f32` or `f64`.

use std::fmt;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Element type of a [`Tensor`].
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;

    /// Elementwise ELU of `xs` into `out`.
    fn elu_slice(xs: &[Self], out: &mut [Self]) {
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = if x > Self::zero() { x } else { x.exp_m1() };
        }
    }

    /// Elementwise logistic sigmoid of `xs` into `out`.
    fn sigmoid_slice(xs: &[Self], out: &mut [Self]) {
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = crate::logistic::sigmoid(x);
        }
    }

    /// `c = a * b + beta * c` on raw strided matrices (see [`crate::gemm`]).
    ///
    /// # Safety
    /// Strides and extents must describe in-bounds accesses of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn elu_slice(xs: &[f32], out: &mut [f32]) {
        crate::fastmath::elu_f32(xs, out)
    }

    fn sigmoid_slice(xs: &[f32], out: &mut [f32]) {
        crate::fastmath::sigmoid_f32(xs, out)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major n-dimensional array. Rank 0 (`shape == []`) holds one scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    elems: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, elems: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != elems.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} elements, got {}", elems.len()),
            ));
        }
        Ok(Tensor { shape, elems })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, elems: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), elems.len());
        Tensor { shape, elems }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            elems: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            elems: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            elems: (0..n).map(&mut f).collect(),
        }
    }

    /// Samples i.i.d. N(0, std^2) entries.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let mut elems = Vec::with_capacity(n);
        while elems.len() < n {
            // Box-Muller, both outputs used.
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let t = std::f64::consts::TAU * u2;
            elems.push(T::from_f64(std * r * t.cos()));
            if elems.len() < n {
                elems.push(T::from_f64(std * r * t.sin()));
            }
        }
        Tensor { shape, elems }
    }

    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::from_f64(lo + (hi - lo) * rng.random::<f64>()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.elems.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn elems(&self) -> &[T] {
        &self.elems
    }

    pub fn elems_mut(&mut self) -> &mut [T] {
        &mut self.elems
    }

    pub fn into_elems(self) -> Vec<T> {
        self.elems
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.elems.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(
                "Tensor::item",
                format!("expected one element, shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.elems.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            elems: self.elems,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            elems: self.elems.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            elems: self.elems.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.elems.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.elems.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "dot",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .elems
            .iter()
            .zip(&other.elems)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn max_abs(&self) -> T {
        self.elems
            .iter()
            .fold(T::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    /// Row-major flat index of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.elems[self.offset(index)]
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.elems.iter_mut().zip(&other.elems) {
            *a = *a + b;
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{:?}>{:?} [", T::DTYPE, self.shape)?;
        for (i, x) in self.elems.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x}")?;
        }
        if self.elems.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
