//! Dense row-major tensors and the deterministic random source used to
//! initialize them.
//!
//! Values are always held as `f64`. A tensor in [`Precision::F32`] mode
//! rounds every stored value through `f32`, so it carries exactly the
//! information an `f32` buffer would while kernels accumulate in `f64`.
//! Every constructor and kernel rejects non-finite values.

mod ops;
mod rng;

pub use ops::*;
pub use rng::Rng;

use crate::error::{Result, VifError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    /// Builds a tensor, validating shape and finiteness and rounding values to
    /// the requested precision.
    pub fn new(shape: &[usize], data: Vec<f64>, precision: Precision) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(VifError::shape(
                "Tensor::new",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Self::finish("Tensor::new", shape.to_vec(), data, precision)
    }

    pub(crate) fn finish(
        op: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        precision: Precision,
    ) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if precision == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VifError::NonFinite(op));
        }
        Ok(Tensor { shape, data, precision })
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Self {
        Self::filled(shape, 0.0, precision)
    }

    pub fn ones(shape: &[usize], precision: Precision) -> Self {
        Self::filled(shape, 1.0, precision)
    }

    pub fn filled(shape: &[usize], value: f64, precision: Precision) -> Self {
        validate_shape(shape).expect("invalid shape");
        assert!(value.is_finite());
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![precision.round(value); numel],
            precision,
        }
    }

    pub fn identity(n: usize, precision: Precision) -> Self {
        let mut t = Self::zeros(&[n, n], precision);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform draws in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, precision: Precision, rng: &mut Rng) -> Self {
        validate_shape(shape).expect("invalid shape");
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| precision.round(rng.uniform(-bound, bound)))
            .collect();
        Tensor { shape: shape.to_vec(), data, precision }
    }

    /// Weight init for a `fan_in x fan_out` matrix: uniform in `±1/sqrt(fan_in)`.
    pub fn init_weight(fan_in: usize, fan_out: usize, precision: Precision, rng: &mut Rng) -> Self {
        Self::uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), precision, rng)
    }

    pub fn from_rows(rows: &[Vec<f64>], precision: Precision) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(VifError::shape("Tensor::from_rows", "ragged rows"));
        }
        Self::new(&[m, n], rows.concat(), precision)
    }

    pub fn row_vector(values: &[f64], precision: Precision) -> Result<Self> {
        Self::new(&[1, values.len()], values.to_vec(), precision)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor; a rank-1 tensor is viewed as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            s => panic!("dims2 on rank-{} tensor", s.len()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Same values under a different precision flag (rounding when narrowing).
    pub fn to_precision(&self, precision: Precision) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| precision.round(v)).collect(),
            precision,
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(VifError::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone(), precision: self.precision })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape, self.precision)
    }

    /// Bitwise equality of shape, precision and every stored value.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.precision == other.precision
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// In-place `self += alpha * other`. Used for gradient accumulation.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(VifError::shape(
                "axpy",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = self.precision.round(*a + alpha * b);
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(VifError::NonFinite("axpy"));
        }
        Ok(())
    }

    /// Mutable access for optimizers and finite-difference probes. Callers
    /// are responsible for keeping values finite and precision-rounded.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Self {
        Tensor { shape, data, precision }
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(VifError::shape("shape", format!("dimensions must be positive, got {shape:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3], Precision::F64).is_err());
        assert!(Tensor::new(&[0, 2], vec![], Precision::F64).is_err());
        assert!(matches!(
            Tensor::new(&[1, 2], vec![1.0, f64::NAN], Precision::F64),
            Err(VifError::NonFinite(_))
        ));
        assert!(Tensor::new(&[1, 1], vec![f64::INFINITY], Precision::F32).is_err());
    }

    #[test]
    fn f32_mode_rounds_storage() {
        let t = Tensor::new(&[1], vec![0.1], Precision::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        let u = Tensor::new(&[1], vec![0.1], Precision::F64).unwrap();
        assert_eq!(u.data()[0], 0.1);
    }

    #[test]
    fn init_weight_is_bounded_and_seeded() {
        let a = Tensor::init_weight(16, 4, Precision::F64, &mut Rng::new(3));
        let b = Tensor::init_weight(16, 4, Precision::F64, &mut Rng::new(3));
        assert!(a.bit_eq(&b));
        assert!(a.max_abs() <= 0.25);
    }
}
