use num_complex::Complex32;

use crate::error::{Error, Result};

use super::{Array, Real};

/// Element type tag; the discriminant is the on-disk dtype code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    Complex64 = 3,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            3 => Some(DType::Complex64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
            DType::Complex64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    Complex64(Vec<Complex32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::Complex64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::Complex64(_) => DType::Complex64,
        }
    }
}

/// Typed storage tensor: raw sensor records, file payloads, checkpoints.
///
/// Storage tensors carry no gradient state. Differentiable math happens on
/// [`Array`] values inside a [`super::Graph`]; complex tensors never enter a
/// graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: TensorData) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn from_array<F: Real>(a: &Array<F>) -> Self {
        let data = if F::DTYPE_NAME == "f64" {
            TensorData::F64(a.data().iter().map(|x| x.as_f64()).collect())
        } else {
            TensorData::F32(a.data().iter().map(|x| x.as_f64() as f32).collect())
        };
        Self {
            shape: a.shape().to_vec(),
            data,
        }
    }

    /// Convert float or u8 storage into a differentiable-array value.
    pub fn to_array<F: Real>(&self) -> Result<Array<F>> {
        let data: Vec<F> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| F::from_f64_lossy(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| F::from_f64_lossy(x)).collect(),
            TensorData::U8(v) => v.iter().map(|&x| F::from_f64_lossy(x as f64)).collect(),
            TensorData::Complex64(_) => {
                return Err(Error::contract(
                    "complex tensors cannot be converted to real arrays",
                ))
            }
        };
        Array::new(self.shape.clone(), data)
    }
}
