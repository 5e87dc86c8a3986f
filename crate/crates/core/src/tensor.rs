//! Dense row-major tensors.
//!
//! Activations use NCHW layout and convolution filters use
//! (out-channels, in-channels, kernel-h, kernel-w). Lower-rank tensors are
//! only used for file I/O (labels, logits).

use crate::error::{Error, Result};

/// Element domain of a tensor as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    I8,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::I8 => 2,
            DType::I32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::I8),
            3 => Some(DType::I32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::dims(
                "data length does not match shape",
                &dims,
                &[data.len()],
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Vec<usize>, value: T) -> Self {
        let len = dims.iter().product();
        Self {
            dims,
            data: vec![value; len],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    /// Shape as (N, C, H, W); errors unless the tensor is rank 4.
    pub fn nchw(&self) -> Result<[usize; 4]> {
        match self.dims[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::dims("expected a rank-4 tensor", &self.dims, &[4])),
        }
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    /// Splits the leading (batch) axis into single-item tensors.
    pub fn split_batch(&self) -> Vec<Tensor<T>> {
        if self.dims.is_empty() || self.dims[0] == 0 {
            return Vec::new();
        }
        let n = self.dims[0];
        let per = self.data.len() / n;
        let mut dims = self.dims.clone();
        dims[0] = 1;
        self.data
            .chunks(per.max(1))
            .take(n)
            .map(|chunk| Tensor {
                dims: dims.clone(),
                data: chunk.to_vec(),
            })
            .collect()
    }

    pub fn same_shape<U>(&self, other: &Tensor<U>) -> bool {
        self.dims == other.dims
    }
}

impl Tensor<f32> {
    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(f64::from)
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, &v| m.max(f64::from(v).abs()))
    }
}

impl Tensor<f64> {
    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|v| v as f32)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// A tensor of any on-disk element domain.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    I8(Tensor<i8>),
    I32(Tensor<i32>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::I8(_) => DType::I8,
            AnyTensor::I32(_) => DType::I32,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::I8(t) => t.dims(),
            AnyTensor::I32(t) => t.dims(),
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            other => Err(Error::Format(format!(
                "expected a float32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn into_i32(self) -> Result<Tensor<i32>> {
        match self {
            AnyTensor::I32(t) => Ok(t),
            AnyTensor::I8(t) => Ok(t.map(i32::from)),
            other => Err(Error::Format(format!(
                "expected an integer tensor, found {:?}",
                other.dtype()
            ))),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<i8>> for AnyTensor {
    fn from(t: Tensor<i8>) -> Self {
        AnyTensor::I8(t)
    }
}

impl From<Tensor<i32>> for AnyTensor {
    fn from(t: Tensor<i32>) -> Self {
        AnyTensor::I32(t)
    }
}
