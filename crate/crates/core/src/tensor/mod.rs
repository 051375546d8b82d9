//! Dense row-major tensors in an `f64` carrier, and the `(data, scale)` pair.

mod io;
pub(crate) mod kernels;
mod scaled;

pub use io::{load_tensor, save_tensor, TensorMeta};
pub use kernels::{broadcast_shapes, matmul_shape};
pub use scaled::{as_scaled_array, quantize_to_scaled, to_tensor, Array, ScaledArray};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{cast_values, DType, Rounding};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, rounding every value into `dtype`.
    pub fn new(shape: impl Into<Vec<usize>>, dtype: DType, mut data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "{} values do not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        cast_values(&mut data, dtype, Rounding::NearestEven);
        Ok(Tensor { shape, dtype, data })
    }

    /// Wide-carrier tensor from values.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, DType::F64, data)
    }

    /// Caller guarantees the length and that values already belong to `dtype`.
    pub(crate) fn from_raw(shape: Vec<usize>, dtype: DType, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, dtype, data }
    }

    pub fn scalar(v: f64, dtype: DType) -> Self {
        let mut data = vec![v];
        cast_values(&mut data, dtype, Rounding::NearestEven);
        Tensor {
            shape: vec![],
            dtype,
            data,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64, dtype: DType) -> Self {
        let shape = shape.into();
        let mut data = vec![v; numel(&shape)];
        cast_values(&mut data, dtype, Rounding::NearestEven);
        Tensor { shape, dtype, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>, dtype: DType) -> Self {
        Self::full(shape, 0.0, dtype)
    }

    /// Gaussian samples `N(mean, std²)`, rounded into `dtype`.
    pub fn randn<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        mean: f64,
        std: f64,
        dtype: DType,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let normal = Normal::new(mean, std).expect("std must be finite and non-negative");
        let data = (0..numel(&shape)).map(|_| normal.sample(rng)).collect();
        Self::new(shape, dtype, data).expect("length matches shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn cast(&self, dtype: DType, rounding: Rounding) -> Tensor {
        let mut data = self.data.clone();
        cast_values(&mut data, dtype, rounding);
        Tensor::from_raw(self.shape.clone(), dtype, data)
    }

    pub(crate) fn cast_in_place(&mut self, dtype: DType) {
        if dtype != DType::F64 {
            cast_values(&mut self.data, dtype, Rounding::NearestEven);
        }
        self.dtype = dtype;
    }

    pub(crate) fn set_dtype_unchecked(&mut self, dtype: DType) {
        self.dtype = dtype;
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor::from_raw(shape, self.dtype, self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(
            self.shape.clone(),
            self.dtype,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Root mean square of the values (0 for an empty tensor).
    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.data.iter().map(|v| v * v).sum();
        (ss / self.data.len() as f64).sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Bitwise equality of shape, dtype and every value (NaN payloads included).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.dtype == other.dtype
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()))
    }
}

/// Elementwise cast into `dtype`; the result carries the new dtype tag.
pub fn quantize_tensor(x: &Tensor, dtype: DType, rounding: Rounding) -> Tensor {
    x.cast(dtype, rounding)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_rounds_into_dtype() {
        let t = Tensor::new([2], DType::E4M3, vec![0.1, 448.0]).unwrap();
        assert_eq!(t.data(), &[0.1015625, 448.0]);
        assert!(Tensor::new([3], DType::F32, vec![1.0]).is_err());
        let z = quantize_tensor(&Tensor::zeros([4], DType::F64), DType::E4M3, Rounding::NearestEven);
        assert_eq!(z.data(), &[0.0; 4]);
        assert_eq!(z.dtype(), DType::E4M3);
    }

    #[test]
    fn tiny_gaussian_collapses_under_direct_e4m3() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([10_000], 0.0, crate::numerics::pow2(-12), DType::F64, &mut rng);
        let q = quantize_tensor(&x, DType::E4M3, Rounding::NearestEven);
        let zeros = q.data().iter().filter(|v| **v == 0.0).count();
        let min_normal = crate::numerics::FloatFormat::E4M3.min_normal();
        let sub_or_zero = q.data().iter().filter(|v| v.abs() < min_normal).count();
        assert!(zeros > 5_000, "zeros={zeros}");
        assert_eq!(sub_or_zero, 10_000);
    }

    #[test]
    fn bit_eq_distinguishes_signed_zero() {
        let a = Tensor::from_vec([1], vec![0.0]).unwrap();
        let b = Tensor::from_vec([1], vec![-0.0]).unwrap();
        assert!(!a.bit_eq(&b));
        assert!(a.bit_eq(&a.clone()));
    }
}
