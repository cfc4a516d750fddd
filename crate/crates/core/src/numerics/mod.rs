//! Typed tensors, symmetric linear quantization and the bit-level memory image.

mod bits;
mod ednt;
mod quant;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bits::{decode_bits, encode_bits, BitImage};
pub use ednt::{read_ednt, read_ednt_file, write_ednt, write_ednt_file};
pub use quant::{dequantize, quantize, quantize_one, quantize_values, quantize_with_scale, symmetric_scale};

/// Storage element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Int4,
    Int8,
    Int16,
    Fp32,
}

impl Dtype {
    pub const ALL: [Dtype; 4] = [Dtype::Int4, Dtype::Int8, Dtype::Int16, Dtype::Fp32];

    pub fn bits(self) -> u32 {
        match self {
            Dtype::Int4 => 4,
            Dtype::Int8 => 8,
            Dtype::Int16 => 16,
            Dtype::Fp32 => 32,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, Dtype::Fp32)
    }

    /// Smallest representable code, `-2^(b-1)`.
    pub fn code_min(self) -> i32 {
        debug_assert!(self.is_integer());
        -(1i32 << (self.bits() - 1))
    }

    /// Largest representable code, `2^(b-1) - 1`.
    pub fn code_max(self) -> i32 {
        debug_assert!(self.is_integer());
        (1i32 << (self.bits() - 1)) - 1
    }

    /// Dtype code used by the EDNT file format.
    pub fn code(self) -> u8 {
        match self {
            Dtype::Int4 => 0,
            Dtype::Int8 => 1,
            Dtype::Int16 => 2,
            Dtype::Fp32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::Int4),
            1 => Ok(Dtype::Int8),
            2 => Ok(Dtype::Int16),
            3 => Ok(Dtype::Fp32),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::Int4 => "int4",
            Dtype::Int8 => "int8",
            Dtype::Int16 => "int16",
            Dtype::Fp32 => "fp32",
        })
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "int4" => Ok(Dtype::Int4),
            "int8" => Ok(Dtype::Int8),
            "int16" => Ok(Dtype::Int16),
            "fp32" => Ok(Dtype::Fp32),
            _ => Err(Error::InvalidArgument(format!("unknown dtype `{s}`"))),
        }
    }
}

/// Element storage of a [`Tensor`].
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    /// Two's-complement integer codes.
    Codes(Vec<i32>),
    Float(Vec<f32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Codes(v) => v.len(),
            TensorData::Float(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense row-major tensor. Integer tensors carry their quantization scale.
#[derive(Debug, Clone)]
pub struct Tensor {
    dtype: Dtype,
    shape: Vec<usize>,
    data: TensorData,
    scale: f64,
}

impl PartialEq for Tensor {
    /// Bit-exact equality: fp32 payloads compare by bit pattern, so NaNs with
    /// identical payloads are equal.
    fn eq(&self, other: &Self) -> bool {
        if self.dtype != other.dtype
            || self.shape != other.shape
            || self.scale.to_bits() != other.scale.to_bits()
        {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::Codes(a), TensorData::Codes(b)) => a == b,
            (TensorData::Float(a), TensorData::Float(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("dimensions must be positive, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = element_count(&shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} holds {n} elements, got {}", data.len())));
        }
        Ok(Self { dtype: Dtype::Fp32, shape, data: TensorData::Float(data), scale: 1.0 })
    }

    pub fn from_codes(dtype: Dtype, shape: Vec<usize>, codes: Vec<i32>, scale: f64) -> Result<Self> {
        if !dtype.is_integer() {
            return Err(Error::DtypeMismatch { expected: "integer dtype".into(), found: dtype.to_string() });
        }
        let n = element_count(&shape)?;
        if n != codes.len() {
            return Err(Error::Shape(format!("shape {shape:?} holds {n} elements, got {}", codes.len())));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c < dtype.code_min() || c > dtype.code_max()) {
            return Err(Error::CodeOutOfRange { code: i64::from(bad), dtype: dtype.to_string() });
        }
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::InvalidArgument(format!("quantization scale must be positive, got {scale}")));
        }
        Ok(Self { dtype, shape, data: TensorData::Codes(codes), scale })
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::Float(v) => Some(v),
            TensorData::Codes(_) => None,
        }
    }

    pub fn as_codes(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::Codes(v) => Some(v),
            TensorData::Float(_) => None,
        }
    }

    /// Real values: the fp32 payload, or codes times scale.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::Float(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::Codes(c) => c.iter().map(|&q| f64::from(q) * self.scale).collect(),
        }
    }
}
