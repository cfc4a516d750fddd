use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Dtype, Tensor};

fn require_integer(target: Dtype) -> Result<()> {
    if target.is_integer() {
        Ok(())
    } else {
        Err(Error::DtypeMismatch { expected: "integer dtype".into(), found: target.to_string() })
    }
}

/// `max|x| / (2^(b-1) - 1)`, or 1 when every value is zero.
pub fn symmetric_scale<S: Scalar>(values: &[S], target: Dtype) -> Result<f64> {
    require_integer(target)?;
    let mut max_abs = 0.0f64;
    for (index, v) in values.iter().enumerate() {
        let v = v.to_f64_lossy();
        if !v.is_finite() {
            return Err(Error::NonFinite { index });
        }
        max_abs = max_abs.max(v.abs());
    }
    Ok(if max_abs == 0.0 { 1.0 } else { max_abs / f64::from(target.code_max()) })
}

/// Quantizes with a fixed scale: round half away from zero, then clamp.
/// Non-finite inputs map to code 0.
pub fn quantize_with_scale<S: Scalar>(values: &[S], target: Dtype, scale: f64) -> Vec<i32> {
    values.iter().map(|v| quantize_one(v.to_f64_lossy(), target, scale)).collect()
}

/// Code of a single value under a fixed scale.
#[inline]
pub fn quantize_one(v: f64, target: Dtype, scale: f64) -> i32 {
    if v.is_finite() {
        // f64::round rounds half away from zero.
        (v / scale).round().clamp(f64::from(target.code_min()), f64::from(target.code_max())) as i32
    } else {
        0
    }
}

/// Symmetric linear quantization of a slice; returns codes and scale.
pub fn quantize_values<S: Scalar>(values: &[S], target: Dtype) -> Result<(Vec<i32>, f64)> {
    let scale = symmetric_scale(values, target)?;
    Ok((quantize_with_scale(values, target, scale), scale))
}

/// Quantizes an fp32 tensor onto an integer dtype.
pub fn quantize(t: &Tensor, target: Dtype) -> Result<Tensor> {
    require_integer(target)?;
    let values = t.as_f32().ok_or_else(|| Error::DtypeMismatch {
        expected: Dtype::Fp32.to_string(),
        found: t.dtype().to_string(),
    })?;
    let (codes, scale) = quantize_values(values, target)?;
    Tensor::from_codes(target, t.shape().to_vec(), codes, scale)
}

/// Element-wise `code * scale` as an fp32 tensor.
pub fn dequantize(t: &Tensor) -> Result<Tensor> {
    let codes = t.as_codes().ok_or_else(|| Error::DtypeMismatch {
        expected: "integer dtype".into(),
        found: t.dtype().to_string(),
    })?;
    let values = codes.iter().map(|&c| (f64::from(c) * t.scale()) as f32).collect();
    Tensor::from_f32(t.shape().to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use proptest::prelude::*;

    fn uniform_tensor(seed: u64, n: usize) -> Tensor {
        let mut s = Stream::new(seed);
        let v = (0..n).map(|_| (s.next_f64() * 2.0 - 1.0) as f32).collect();
        Tensor::from_f32(vec![n], v).unwrap()
    }

    #[test]
    fn int8_code_range() {
        let t = Tensor::from_f32(vec![3], vec![-10.0, 0.0, 10.0]).unwrap();
        let q = quantize(&t, Dtype::Int8).unwrap();
        assert_eq!(q.as_codes().unwrap(), &[-127, 0, 127]);
        let extreme = Tensor::from_codes(Dtype::Int8, vec![2], vec![-128, 127], 1.0).unwrap();
        assert_eq!(extreme.as_codes().unwrap(), &[-128, 127]);
    }

    #[test]
    fn all_zero_tensor_has_unit_scale() {
        let t = Tensor::from_f32(vec![4], vec![0.0; 4]).unwrap();
        let q = quantize(&t, Dtype::Int4).unwrap();
        assert_eq!(q.scale(), 1.0);
        assert_eq!(q.as_codes().unwrap(), &[0; 4]);
        let d = dequantize(&q).unwrap();
        assert_eq!(d.as_f32().unwrap(), &[0.0; 4]);
    }

    #[test]
    fn rejects_non_finite() {
        let t = Tensor::from_f32(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(quantize(&t, Dtype::Int8), Err(Error::NonFinite { index: 1 })));
        let t = Tensor::from_f32(vec![1], vec![f32::INFINITY]).unwrap();
        assert!(quantize(&t, Dtype::Int8).is_err());
    }

    #[test]
    fn rejects_float_target() {
        let t = Tensor::from_f32(vec![1], vec![1.0]).unwrap();
        assert!(quantize(&t, Dtype::Fp32).is_err());
    }

    #[test]
    fn dequantize_is_code_times_scale() {
        let t = Tensor::from_codes(Dtype::Int8, vec![1], vec![127], 0.01).unwrap();
        let d = dequantize(&t).unwrap();
        assert!((d.as_f32().unwrap()[0] - 1.27).abs() < 1e-6);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let codes = quantize_with_scale(&[0.5f64, -0.5, 1.5, -1.5, 2.4999], Dtype::Int8, 1.0);
        assert_eq!(codes, vec![1, -1, 2, -2, 2]);
    }

    #[test]
    fn int8_error_bound_on_random_tensor() {
        let t = uniform_tensor(11, 10_000);
        let q = quantize(&t, Dtype::Int8).unwrap();
        let d = dequantize(&q).unwrap();
        let half = q.scale() / 2.0;
        for (x, y) in t.as_f32().unwrap().iter().zip(d.as_f32().unwrap()) {
            // fp32 rounding of the dequantized value adds at most one ulp.
            assert!(f64::from((x - y).abs()) <= half * (1.0 + 1e-6));
        }
    }

    #[test]
    fn requantization_is_idempotent_over_all_int8_codes() {
        for &scale in &[1.0, 0.013, 7.25e-4] {
            let values: Vec<f32> = (-128..=127).map(|c| (f64::from(c) * scale) as f32).collect();
            let x = Tensor::from_f32(vec![values.len()], values).unwrap();
            let q1 = quantize(&x, Dtype::Int8).unwrap();
            let q2 = quantize(&dequantize(&q1).unwrap(), Dtype::Int8).unwrap();
            let q3 = quantize(&dequantize(&q2).unwrap(), Dtype::Int8).unwrap();
            assert_eq!(q1.as_codes(), q2.as_codes());
            assert_eq!(q2.as_codes(), q3.as_codes());
        }
    }

    proptest! {
        #[test]
        fn error_bound_holds(values in prop::collection::vec(-1.0e3f32..1.0e3, 1..64),
                             dtype in prop::sample::select(vec![Dtype::Int4, Dtype::Int8, Dtype::Int16])) {
            let t = Tensor::from_f32(vec![values.len()], values.clone()).unwrap();
            let q = quantize(&t, dtype).unwrap();
            let d = dequantize(&q).unwrap();
            for (x, y) in values.iter().zip(d.as_f32().unwrap()) {
                let err = (f64::from(*x) - f64::from(*y)).abs();
                prop_assert!(err <= q.scale() / 2.0 + f64::from(x.abs()) * 1e-6 + 1e-30);
            }
        }

        #[test]
        fn power_of_two_scaling_preserves_codes(values in prop::collection::vec(-1.0e3f32..1.0e3, 1..64),
                                                exp in -20i32..20) {
            let c = 2f32.powi(exp);
            let t = Tensor::from_f32(vec![values.len()], values.clone()).unwrap();
            let scaled = Tensor::from_f32(vec![values.len()], values.iter().map(|v| v * c).collect()).unwrap();
            let a = quantize(&t, Dtype::Int8).unwrap();
            let b = quantize(&scaled, Dtype::Int8).unwrap();
            prop_assert_eq!(a.as_codes(), b.as_codes());
        }

        #[test]
        fn positive_scaling_preserves_codes_away_from_ties(values in prop::collection::vec(-1.0e3f64..1.0e3, 1..64),
                                                           c in 1.0e-3f64..1.0e3) {
            let (a, scale) = quantize_values(&values, Dtype::Int8).unwrap();
            let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
            let (b, _) = quantize_values(&scaled, Dtype::Int8).unwrap();
            for ((x, qa), qb) in values.iter().zip(&a).zip(&b) {
                let frac = (x / scale).abs().fract();
                // Exact half-way points may round either way after rescaling.
                if (frac - 0.5).abs() > 1e-9 {
                    prop_assert_eq!(qa, qb);
                }
            }
        }
    }
}
