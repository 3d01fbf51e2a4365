use crate::error::{FdseError, Result};
use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar type the whole stack is generic over. f32 is the production dtype;
/// f64 exists so tests can run the same code at tighter tolerances.
pub trait Real:
    Float + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn into_f32(self) -> f32;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn into_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn into_f32(self) -> f32 {
        self as f32
    }
}

/// Dense row-major tensor. Shape [] is not allowed; scalars are shape [1].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(FdseError::Dimension(format!(
                "shape {:?} (numel {}) does not match data length {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); numel] }
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![v; numel] }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, F::one())
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: (0..numel).map(|i| f(i)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(FdseError::Dimension(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Squared L2 norm accumulated in f64 regardless of F.
    pub fn sq_norm_f64(&self) -> f64 {
        self.data.iter().map(|v| {
            let x = v.into_f64();
            x * x
        }).sum()
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(FdseError::NonFinite(context.to_string()));
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v.into_f64()).collect() }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v.into_f32()).collect() }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.into_f64())).collect(),
        }
    }
}

/// Largest |a - b| over two equal-shaped tensors, in f64.
pub fn max_abs_diff<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.into_f64() - y.into_f64()).abs())
        .fold(0.0, f64::max)
}
