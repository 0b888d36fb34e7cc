//! Dense row-major float32 tensor storage.

use std::sync::Arc;

use super::NumericsError;

/// Dense row-major tensor of `f32` values.
///
/// Cloning is cheap (the buffer is shared); mutation through
/// [`Tensor::data_mut`] copies on write if the buffer is shared.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    /// Builds a tensor from a flat row-major buffer.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Self, NumericsError> {
        if shape.is_empty() {
            return Err(NumericsError::arg("Tensor::new", "shape must have at least one dimension"));
        }
        if shape.contains(&0) {
            return Err(NumericsError::arg(
                "Tensor::new",
                format!("zero-sized dimensions are not supported: {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(NumericsError::shape(
                "Tensor::new",
                format!("buffer has {} elements but shape {:?} needs {}", data.len(), shape, numel),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data) })
    }

    /// Single-element tensor with shape `[1]`.
    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]) }
    }

    /// Tensor of zeros.
    pub fn zeros(shape: &[usize]) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape)
    }

    /// Tensor of ones.
    pub fn ones(shape: &[usize]) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![1.0; numel], shape)
    }

    /// Two-dimensional tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, NumericsError> {
        if rows.is_empty() {
            return Err(NumericsError::arg("Tensor::from_rows", "need at least one row"));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::shape("Tensor::from_rows", "rows have unequal lengths"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(data, &[rows.len(), cols])
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Dimensions of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), NumericsError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(NumericsError::shape("Tensor::dims2", format!("expected rank 2, got {other:?}"))),
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view of the buffer; copies if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Element of a rank-2 tensor.
    pub fn get2(&self, row: usize, col: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data[row * cols + col]
    }

    /// Row slice of a rank-2 tensor.
    pub fn row(&self, row: usize) -> &[f32] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[row * cols..(row + 1) * cols]
    }

    /// Same buffer under a different shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(NumericsError::shape(
                "Tensor::reshaped",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    /// True when shapes match and every element is bitwise identical.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference; infinity on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.shape != other.shape {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// True if any element is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}
