use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::NumError;

/// Dense row-major f64 array with explicit shape metadata.
///
/// Graph operations view a tensor as a matrix: the last axis is the column
/// axis and every leading axis is folded into rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(NumError::BadShape { shape, len: data.len() });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; len]).expect("zero-sized dimension")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        Self::new(vec![rows, cols], data)
    }

    /// A `1 × n` row vector.
    pub fn row(data: Vec<f64>) -> Result<Self, NumError> {
        let n = data.len();
        Self::new(vec![1, n], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumError::BadShape {
                    shape: vec![rows.len(), cols],
                    len: rows.iter().map(Vec::len).sum(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let len = shape.iter().product();
        let data = (0..len).map(|_| normal.sample(rng)).collect();
        Self::new(shape.to_vec(), data).expect("zero-sized dimension")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NumError> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != self.data.len() {
            return Err(NumError::BadShape {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
