//! Dense row-major tensors and a small reverse-mode tape covering the
//! operations the text models need.

mod checkpoint;
mod gradcheck;
pub mod ops;
mod params;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, NumCast};

use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};

/// Element type. Models run in `f32`; `f64` exists for numerical checks.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("float literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Filter widths, filter count per width and embedding depth of one conv bank.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvBankSpec {
    pub widths: Vec<usize>,
    pub filters_per_width: usize,
    pub embed_dim: usize,
}

impl Default for ConvBankSpec {
    fn default() -> Self {
        ConvBankSpec {
            widths: vec![1, 2, 3, 4, 5],
            filters_per_width: 128,
            embed_dim: 200,
        }
    }
}

impl ConvBankSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths[0] == 0 {
            return Err(Error::Config("conv widths must be non-empty and >= 1".into()));
        }
        if self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "conv widths must be strictly increasing, got {:?}",
                self.widths
            )));
        }
        if self.filters_per_width == 0 || self.embed_dim == 0 {
            return Err(Error::Config("filters_per_width and embed_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn max_width(&self) -> usize {
        *self.widths.last().unwrap_or(&1)
    }

    /// Pooled features produced by one channel.
    pub fn output_width(&self) -> usize {
        self.widths.len() * self.filters_per_width
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dims must be >= 1, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        ops::axpy(&mut self.data, T::one(), &other.data);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}
