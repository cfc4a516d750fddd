use crate::error::{Error, Result};

use super::{Dtype, Tensor, TensorData};

/// Flat bit image of a tensor as it sits in memory.
///
/// Image bit `j` lives in byte `j / 8` at bit position `j % 8`. Element `i`
/// occupies image bits `i * w .. (i + 1) * w` with its least significant bit
/// first, so fp32 elements are their little-endian IEEE-754 bytes and int4
/// elements are packed two per byte, low nibble first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitImage {
    bytes: Vec<u8>,
    element_width: u32,
    element_count: usize,
}

impl BitImage {
    pub fn zeroed(element_width: u32, element_count: usize) -> Self {
        let bits = element_width as usize * element_count;
        Self { bytes: vec![0; bits.div_ceil(8)], element_width, element_count }
    }

    /// Wraps raw bytes; trailing pad bits past the last element must be zero.
    pub fn from_bytes(bytes: Vec<u8>, element_width: u32, element_count: usize) -> Result<Self> {
        let bits = element_width as usize * element_count;
        if bytes.len() != bits.div_ceil(8) {
            return Err(Error::Shape(format!(
                "{element_count} x {element_width}-bit elements need {} bytes, got {}",
                bits.div_ceil(8),
                bytes.len()
            )));
        }
        if bits % 8 != 0 && bytes[bytes.len() - 1] >> (bits % 8) != 0 {
            return Err(Error::Format("non-zero padding bits".into()));
        }
        Ok(Self { bytes, element_width, element_count })
    }

    pub fn from_f32(values: &[f32]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { bytes, element_width: 32, element_count: values.len() }
    }

    /// Packs integer codes as two's complement; codes must fit `dtype`.
    pub fn from_codes(codes: &[i32], dtype: Dtype) -> Self {
        let mut img = Self::zeroed(dtype.bits(), codes.len());
        match dtype {
            Dtype::Int4 => {
                for (i, &c) in codes.iter().enumerate() {
                    img.bytes[i / 2] |= ((c as u8) & 0x0F) << ((i % 2) * 4);
                }
            }
            Dtype::Int8 => {
                for (b, &c) in img.bytes.iter_mut().zip(codes) {
                    *b = c as i8 as u8;
                }
            }
            Dtype::Int16 => {
                for (chunk, &c) in img.bytes.chunks_exact_mut(2).zip(codes) {
                    chunk.copy_from_slice(&(c as i16).to_le_bytes());
                }
            }
            Dtype::Fp32 => {
                for (chunk, &c) in img.bytes.chunks_exact_mut(4).zip(codes) {
                    chunk.copy_from_slice(&(c as f32).to_le_bytes());
                }
            }
        }
        img
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        debug_assert_eq!(self.element_width, 32);
        self.bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    /// Sign-extends each element back to an `i32` code.
    pub fn to_codes(&self, dtype: Dtype) -> Vec<i32> {
        match dtype {
            Dtype::Int4 => (0..self.element_count)
                .map(|i| {
                    let nib = (self.bytes[i / 2] >> ((i % 2) * 4)) & 0x0F;
                    (((nib << 4) as i8) >> 4) as i32
                })
                .collect(),
            Dtype::Int8 => self.bytes.iter().map(|&b| b as i8 as i32).collect(),
            Dtype::Int16 => self
                .bytes
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as i32)
                .collect(),
            Dtype::Fp32 => self.to_f32_vec().into_iter().map(|v| v as i32).collect(),
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn element_width(&self) -> u32 {
        self.element_width
    }

    pub fn element_count(&self) -> usize {
        self.element_count
    }

    /// Number of meaningful bits (`element_width * element_count`).
    pub fn bit_len(&self) -> usize {
        self.element_width as usize * self.element_count
    }

    #[inline]
    pub fn get(&self, bit: usize) -> bool {
        debug_assert!(bit < self.bit_len());
        (self.bytes[bit / 8] >> (bit % 8)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, bit: usize, value: bool) {
        debug_assert!(bit < self.bit_len());
        let mask = 1u8 << (bit % 8);
        if value {
            self.bytes[bit / 8] |= mask;
        } else {
            self.bytes[bit / 8] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, bit: usize) {
        debug_assert!(bit < self.bit_len());
        self.bytes[bit / 8] ^= 1u8 << (bit % 8);
    }

    pub fn count_ones(&self) -> u64 {
        self.bytes.iter().map(|b| u64::from(b.count_ones())).sum()
    }
}

/// Serializes a tensor into its memory image.
pub fn encode_bits(t: &Tensor) -> BitImage {
    match t.data() {
        TensorData::Float(v) => BitImage::from_f32(v),
        TensorData::Codes(c) => BitImage::from_codes(c, t.dtype()),
    }
}

/// Inverse of [`encode_bits`]. Integer tensors take their scale from the
/// caller, since the image carries only codes.
pub fn decode_bits(img: &BitImage, dtype: Dtype, shape: &[usize], scale: f64) -> Result<Tensor> {
    if img.element_width() != dtype.bits() {
        return Err(Error::DtypeMismatch {
            expected: format!("{}-bit elements", dtype.bits()),
            found: format!("{}-bit elements", img.element_width()),
        });
    }
    let n: usize = shape.iter().product();
    if n != img.element_count() {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {n} elements, image holds {}",
            img.element_count()
        )));
    }
    match dtype {
        Dtype::Fp32 => Tensor::from_f32(shape.to_vec(), img.to_f32_vec()),
        _ => Tensor::from_codes(dtype, shape.to_vec(), img.to_codes(dtype), scale),
    }
}
