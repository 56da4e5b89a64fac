//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain value: a shape and a contiguous buffer. Differentiable
//! computation goes through [`Tape`], which hands out [`Var`] handles that
//! carry `requires_grad` and an accumulated gradient.
//!
//! Everything is generic over [`Scalar`] so the same model code can be run in
//! `f64` when checking gradients against finite differences. Training and
//! inference use `f32`.

mod gradcheck;
#[doc(hidden)]
pub mod kernels;
mod pattern;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use pattern::RearrangePattern;
pub use tape::{Elementwise, Operand, Tape, Var};

/// Element type of a tensor.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal. Infallible for the float types we implement.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("float literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float conversion")
    }

    /// Raw bit pattern, widened, for bitwise comparisons.
    fn to_bits_u64(self) -> u64;
}

impl Scalar for f32 {
    fn to_bits_u64(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}

/// Dense N-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<E: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid_shape(&shape, "dimensions must be positive"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid_shape(
                &shape,
                format!("expected {numel} elements, buffer has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities.
    pub fn new_finite(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.ensure_finite("tensor")?;
        Ok(t)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: shape must be positive")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::one())
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> E) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self::new(shape, data).expect("from_fn: shape must be positive")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        self.data[0]
    }

    pub fn strides(&self) -> Vec<usize> {
        kernels::strides(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn at(&self, index: &[usize]) -> E {
        self.data[self.offset(index)]
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(&self.shape, &shape));
        }
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| F::from_f64(v.as_f64()).expect("cast"))
                .collect(),
        }
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> E {
        self.sum() / E::lit(self.numel() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<E> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(E::zero(), E::max))
    }

    /// True when shapes match and every element has the identical bit pattern.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    /// Generic axis permutation.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let (shape, index) = kernels::permute_index(&self.shape, axes)?;
        Ok(Self {
            shape,
            data: index.iter().map(|&i| self.data[i]).collect(),
        })
    }

    /// Gathers `self.data[index[i]]` into a tensor of `shape`.
    pub fn gather(&self, shape: &[usize], index: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::invalid_shape(shape, "index length mismatch"));
        }
        Self::new(shape.to_vec(), index.iter().map(|&i| self.data[i]).collect())
    }

    /// Einops-style reshape/permute, e.g. `"b t c h w -> (b t) c h w"`.
    pub fn rearrange(&self, pattern: &str, sizes: &[(&str, usize)]) -> Result<Self> {
        let plan = RearrangePattern::parse(pattern)?.plan(&self.shape, sizes)?;
        let permuted = Self::new(plan.split_shape.clone(), self.data.clone())?.permute(&plan.perm)?;
        Self::new(plan.out_shape, permuted.data)
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (shape, data) = kernels::batched_matmul(&self.shape, &self.data, &rhs.shape, &rhs.data)?;
        Self::new(shape, data)
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let data = kernels::softmax(&self.shape, &self.data, axis)?;
        Self::new(self.shape.clone(), data)
    }

    pub fn conv2d(&self, weight: &Self, bias: Option<&Self>) -> Result<Self> {
        let (shape, data) = kernels::conv2d(
            &self.shape,
            &self.data,
            &weight.shape,
            &weight.data,
            bias.map(|b| b.data.as_slice()),
        )?;
        Self::new(shape, data)
    }
}
