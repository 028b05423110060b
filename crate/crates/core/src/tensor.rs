//! Dense row-major tensors over a generic real scalar.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_mismatch, Error, Result};

/// Scalar type a [`Tensor`] can hold. Training runs in `f32`; the gradient
/// checker can evaluate the same graphs in `f64`.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// Raw strided GEMM: `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m x k`, `k x n` and
    /// `m x n` matrices, with `c` not aliasing `a` or `b`.
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

    fn of(x: f64) -> Self {
        x as f32
    }

    fn f64(self) -> f64 {
        self as f64
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

    fn of(x: f64) -> Self {
        x
    }

    fn f64(self) -> f64 {
        self
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

/// Initial contents for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Ones,
    Constant(f64),
    Normal { mean: f64, std: f64, seed: u64 },
}

/// N-dimensional array. Images are `[batch, channel, height, width]`,
/// volumes `[batch, channel, depth, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R: Real = f32> {
    shape: Vec<usize>,
    data: Vec<R>,
    pub requires_grad: bool,
    pub grad: Option<Vec<R>>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: &[usize], data: Vec<R>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(shape_mismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn create(shape: &[usize], fill: Fill) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = match fill {
            Fill::Zeros => vec![R::zero(); n],
            Fill::Ones => vec![R::one(); n],
            Fill::Constant(c) => vec![R::of(c); n],
            Fill::Normal { mean, std, seed } => normal_samples(n, mean, std, seed)?,
        };
        Self::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Fill::Zeros)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Fill::Ones)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::create(shape, Fill::Constant(value))
    }

    pub fn randn(shape: &[usize], mean: f64, std: f64, seed: u64) -> Result<Self> {
        Self::create(shape, Fill::Normal { mean, std, seed })
    }

    pub fn scalar(value: R) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<R> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::NotScalar(self.shape.clone())),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| S::of(v.f64())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> R {
        self.data.iter().copied().sum()
    }

    /// Channel sub-range `[start, end)` along axis 1.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        if self.rank() < 2 || start >= end || end > self.shape[1] {
            return Err(shape_mismatch(format!(
                "cannot take channels {start}..{end} of {:?}",
                self.shape
            )));
        }
        let b = self.shape[0];
        let c = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(b * (end - start) * inner);
        for bi in 0..b {
            let base = bi * c * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = end - start;
        Self::new(&shape, data)
    }

    /// Samples `[start, end)` along axis 0.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape[0] {
            return Err(shape_mismatch(format!(
                "cannot take samples {start}..{end} of {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::new(&shape, self.data[start * inner..end * inner].to_vec())
    }

    /// Zero the accumulated gradient, allocating it if absent.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = R::zero()),
            None => self.grad = Some(vec![R::zero(); self.data.len()]),
        }
    }
}

fn normal_samples<R: Real>(n: usize, mean: f64, std: f64, seed: u64) -> Result<Vec<R>> {
    if !(std >= 0.0 && std.is_finite() && mean.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "normal fill needs finite mean and std >= 0, got ({mean}, {std})"
        )));
    }
    if std == 0.0 {
        return Ok(vec![R::of(mean); n]);
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| R::of(dist.sample(&mut rng))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_zeros_and_constant() {
        let t = Tensor::<f32>::create(&[2, 3], Fill::Zeros).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.data(), &[0.0; 6]);
        let c = Tensor::<f32>::create(&[1], Fill::Constant(5.0)).unwrap();
        assert_eq!(c.data(), &[5.0]);
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(matches!(
            Tensor::<f32>::zeros(&[2, 0]),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::<f32>::zeros(&[]),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn normal_fill_statistics() {
        let t = Tensor::<f32>::randn(&[10000], 0.0, 0.02, 7).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.001, "mean {mean}");
        assert!((var.sqrt() - 0.02).abs() < 0.002, "std {}", var.sqrt());
        let again = Tensor::<f32>::randn(&[10000], 0.0, 0.02, 7).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn negative_std_is_rejected() {
        assert!(Tensor::<f32>::randn(&[3], 0.0, -1.0, 0).is_err());
    }

    #[test]
    fn channel_slice() {
        let t = Tensor::<f32>::new(&[2, 3, 1], (0..6).map(|v| v as f32).collect()).unwrap();
        let s = t.slice_channels(1, 3).unwrap();
        assert_eq!(s.shape(), &[2, 2, 1]);
        assert_eq!(s.data(), &[1.0, 2.0, 4.0, 5.0]);
    }
}
