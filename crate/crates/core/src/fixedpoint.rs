//! Power-of-two fixed-point quantization.
//!
//! A real value `r` is represented by an integer `r_int` and a fractional-bit
//! count `frac_bits` so that `r ≈ r_int · 2^(−frac_bits)`. Conversion only
//! ever scales by powers of two, rounds and saturates; there are no
//! multiplicative scale factors or zero points.
//!
//! `frac_bits` may be negative (only the digits above the binary point are
//! kept) or larger than the bit width (only digits below it are kept).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Narrowest and widest supported operand widths. Operands are multiplied
/// into 32-bit accumulators, so anything wider than 16 bits is rejected.
pub const MIN_BIT_WIDTH: u32 = 2;
pub const MAX_BIT_WIDTH: u32 = 16;

/// Rounds to the nearest integer, ties away from zero.
///
/// Every rounding step in the toolkit (float quantization, bias alignment,
/// requantization shifts) goes through this rule.
#[inline]
pub fn round_nearest(x: f64) -> f64 {
    x.round()
}

/// Divides `value` by `2^shift` with round-to-nearest, ties away from zero,
/// when `shift > 0`; multiplies by `2^(−shift)` exactly when `shift ≤ 0`.
///
/// The result is wide enough that callers can detect overflow or saturate.
/// Huge left shifts of a non-zero value return a magnitude beyond any i64.
pub fn shift_round(value: i64, shift: i32) -> i128 {
    let v = i128::from(value);
    if v == 0 {
        return 0;
    }
    if shift <= 0 {
        let k = shift.unsigned_abs();
        if k > 64 {
            return v.signum() << 100;
        }
        v << k
    } else {
        let k = shift as u32;
        if k >= 100 {
            return 0;
        }
        let magnitude = (v.abs() + (1i128 << (k - 1))) >> k;
        magnitude * v.signum()
    }
}

/// Scale `2^exp` as an f64. Exact for every exponent the toolkit produces.
#[inline]
pub fn pow2(exp: i32) -> f64 {
    2f64.powi(exp)
}

/// Per-tensor fixed-point format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantParams {
    pub frac_bits: i32,
    pub bit_width: u32,
    pub signed: bool,
}

impl QuantParams {
    pub fn new(frac_bits: i32, bit_width: u32, signed: bool) -> Result<Self> {
        let p = Self {
            frac_bits,
            bit_width,
            signed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn signed(frac_bits: i32, bit_width: u32) -> Result<Self> {
        Self::new(frac_bits, bit_width, true)
    }

    pub fn unsigned(frac_bits: i32, bit_width: u32) -> Result<Self> {
        Self::new(frac_bits, bit_width, false)
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_BIT_WIDTH..=MAX_BIT_WIDTH).contains(&self.bit_width) {
            return Err(Error::InvalidParams(format!(
                "bit width {} outside [{MIN_BIT_WIDTH}, {MAX_BIT_WIDTH}]",
                self.bit_width
            )));
        }
        Ok(())
    }

    /// Inclusive integer range `(lo, hi)`.
    pub fn range(&self) -> (i64, i64) {
        if self.signed {
            let half = 1i64 << (self.bit_width - 1);
            (-half, half - 1)
        } else {
            (0, (1i64 << self.bit_width) - 1)
        }
    }

    pub fn with_frac_bits(self, frac_bits: i32) -> Self {
        Self { frac_bits, ..self }
    }

    pub fn clamp(&self, v: i128) -> i32 {
        let (lo, hi) = self.range();
        v.clamp(i128::from(lo), i128::from(hi)) as i32
    }

    /// Real value of one integer in this format.
    pub fn real(&self, v: i32) -> f64 {
        f64::from(v) * pow2(-self.frac_bits)
    }
}

/// Integer tensor plus the format it is expressed in.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    ints: Tensor<i32>,
    params: QuantParams,
}

impl QuantizedTensor {
    /// Wraps integers that are already in range for `params`.
    pub fn new(ints: Tensor<i32>, params: QuantParams) -> Result<Self> {
        params.validate()?;
        let (lo, hi) = params.range();
        if let Some((index, &v)) = ints
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| i64::from(v) < lo || i64::from(v) > hi)
        {
            return Err(Error::Range {
                name: "quantized tensor".into(),
                index,
                value: i64::from(v),
                lo,
                hi,
            });
        }
        Ok(Self { ints, params })
    }

    pub fn ints(&self) -> &Tensor<i32> {
        &self.ints
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn frac_bits(&self) -> i32 {
        self.params.frac_bits
    }

    pub fn dims(&self) -> &[usize] {
        self.ints.dims()
    }

    pub fn into_parts(self) -> (Tensor<i32>, QuantParams) {
        (self.ints, self.params)
    }

    /// Real values as f64; exact for every supported format.
    pub fn to_real(&self) -> Tensor<f64> {
        let scale = pow2(-self.params.frac_bits);
        self.ints.map(|v| f64::from(v) * scale)
    }
}

/// Quantizes one real value: saturate(round(r · 2^frac_bits)).
///
/// Returns the integer and its real value `int · 2^(−frac_bits)`.
pub fn quantize_scalar(r: f64, p: QuantParams) -> Result<(i32, f64)> {
    p.validate()?;
    if !r.is_finite() {
        return Err(Error::NonFinite { index: 0, value: r });
    }
    let v = quantize_unchecked(r, p);
    Ok((v, p.real(v)))
}

#[inline]
fn quantize_unchecked(r: f64, p: QuantParams) -> i32 {
    let (lo, hi) = p.range();
    round_nearest(r * pow2(p.frac_bits)).clamp(lo as f64, hi as f64) as i32
}

/// Elementwise [`quantize_scalar`] over any real-valued tensor.
pub fn quantize_tensor<T>(t: &Tensor<T>, p: QuantParams) -> Result<QuantizedTensor>
where
    T: Copy + Into<f64>,
{
    p.validate()?;
    let mut ints = Vec::with_capacity(t.len());
    for (index, &v) in t.data().iter().enumerate() {
        let r: f64 = v.into();
        if !r.is_finite() {
            return Err(Error::NonFinite { index, value: r });
        }
        ints.push(quantize_unchecked(r, p));
    }
    Ok(QuantizedTensor {
        ints: Tensor::new(t.dims().to_vec(), ints)?,
        params: p,
    })
}

/// Real values of a quantized tensor as float32.
pub fn dequantize(q: &QuantizedTensor) -> Tensor<f32> {
    q.to_real().to_f32()
}

/// Fractional-bit search window for one tensor.
///
/// `hi_i = ceil(log2(max|t| + 1)) + 1`, `lo_i = hi_i − tau`; each `i` in
/// `[lo_i, hi_i]` maps to the candidate `frac_bits = (bit_width − 1) − i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FracWindow {
    pub lo_i: i32,
    pub hi_i: i32,
    pub bit_width: u32,
}

impl FracWindow {
    pub fn len(&self) -> usize {
        (self.hi_i - self.lo_i + 1).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Candidate fractional bits in search order (ascending `i`, so
    /// descending `frac_bits`).
    pub fn candidates(&self) -> impl Iterator<Item = i32> + Clone {
        let top = self.bit_width as i32 - 1;
        (self.lo_i..=self.hi_i).map(move |i| top - i)
    }
}

pub fn max_frac_window(max_abs: f64, bit_width: u32, tau: u32) -> FracWindow {
    let hi_i = ceil_log2(max_abs + 1.0) + 1;
    FracWindow {
        lo_i: hi_i - tau as i32,
        hi_i,
        bit_width,
    }
}

/// Window for a whole tensor.
pub fn tensor_frac_window<T>(t: &Tensor<T>, bit_width: u32, tau: u32) -> FracWindow
where
    T: Copy + Into<f64>,
{
    let max_abs = t
        .data()
        .iter()
        .fold(0.0f64, |m, &v| m.max(Into::<f64>::into(v).abs()));
    max_frac_window(max_abs, bit_width, tau)
}

/// Smallest `k` with `2^k ≥ x`, for `x ≥ 1`.
fn ceil_log2(x: f64) -> i32 {
    let mut k = x.log2().ceil() as i32;
    while k > i32::MIN + 1 && pow2(k - 1) >= x {
        k -= 1;
    }
    while pow2(k) < x {
        k += 1;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s8(frac: i32) -> QuantParams {
        QuantParams::signed(frac, 8).unwrap()
    }

    #[test]
    fn scalar_examples() {
        assert_eq!(quantize_scalar(0.0, s8(3)).unwrap(), (0, 0.0));
        assert_eq!(quantize_scalar(0.7, s8(2)).unwrap(), (3, 0.75));
        assert_eq!(quantize_scalar(100.0, s8(2)).unwrap(), (127, 31.75));
        assert_eq!(quantize_scalar(1000.0, s8(-3)).unwrap(), (125, 1000.0));
        let u8p = QuantParams::unsigned(6, 8).unwrap();
        assert_eq!(quantize_scalar(5.0, u8p).unwrap(), (255, 3.984375));
    }

    #[test]
    fn rejects_non_finite_and_bad_widths() {
        assert!(matches!(
            quantize_scalar(f64::NAN, s8(0)),
            Err(Error::NonFinite { .. })
        ));
        assert!(QuantParams::signed(0, 1).is_err());
        assert!(QuantParams::signed(0, 17).is_err());
        let t = Tensor::new(vec![3], vec![1.0f32, f32::INFINITY, 0.0]).unwrap();
        match quantize_tensor(&t, s8(0)) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ties_round_away_from_zero() {
        assert_eq!(quantize_scalar(0.5, s8(0)).unwrap().0, 1);
        assert_eq!(quantize_scalar(-0.5, s8(0)).unwrap().0, -1);
        assert_eq!(quantize_scalar(2.5, s8(0)).unwrap().0, 3);
    }

    #[test]
    fn tensor_examples() {
        let z = Tensor::filled(vec![1, 1, 2, 2], 0.0f32);
        assert!(quantize_tensor(&z, s8(4))
            .unwrap()
            .ints()
            .data()
            .iter()
            .all(|&v| v == 0));
        let t = Tensor::new(vec![2], vec![0.7f32, -0.7]).unwrap();
        assert_eq!(quantize_tensor(&t, s8(2)).unwrap().ints().data(), &[3, -3]);
        let t = Tensor::new(vec![1], vec![31.75f32]).unwrap();
        let q = quantize_tensor(&t, s8(2)).unwrap();
        assert_eq!(q.ints().data(), &[127]);
        assert_eq!(dequantize(&q).data(), &[31.75]);
    }

    #[test]
    fn dequantize_examples() {
        let q = QuantizedTensor::new(Tensor::new(vec![1], vec![3]).unwrap(), s8(2)).unwrap();
        assert_eq!(dequantize(&q).data(), &[0.75]);
        let q = QuantizedTensor::new(Tensor::new(vec![1], vec![0]).unwrap(), s8(2)).unwrap();
        assert_eq!(dequantize(&q).data(), &[0.0]);
        let back = quantize_tensor(&dequantize(&q), q.params()).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn out_of_range_ints_are_rejected() {
        let t = Tensor::new(vec![1], vec![128]).unwrap();
        assert!(QuantizedTensor::new(t, s8(0)).is_err());
    }

    #[test]
    fn window_examples() {
        let w = max_frac_window(0.5, 8, 4);
        assert_eq!((w.lo_i, w.hi_i), (-2, 2));
        assert_eq!(w.candidates().collect::<Vec<_>>(), vec![9, 8, 7, 6, 5]);
        assert_eq!(max_frac_window(7.0, 8, 4).hi_i, 4);
        assert_eq!(max_frac_window(0.0, 8, 4).hi_i, 1);
        assert_eq!(max_frac_window(0.0, 8, 0).len(), 1);
    }

    #[test]
    fn shift_round_both_directions() {
        assert_eq!(shift_round(64, 3), 8);
        assert_eq!(shift_round(3, 1), 2);
        assert_eq!(shift_round(-3, 1), -2);
        assert_eq!(shift_round(5, 2), 1);
        assert_eq!(shift_round(6, 2), 2);
        assert_eq!(shift_round(100, -3), 800);
        assert_eq!(shift_round(7, 200), 0);
        assert!(shift_round(1, -200) > i128::from(i64::MAX));
        assert!(shift_round(-1, -200) < i128::from(i64::MIN));
    }

    #[test]
    fn ceil_log2_at_powers_of_two() {
        for k in 0..40 {
            assert_eq!(ceil_log2(pow2(k)), k);
            assert_eq!(ceil_log2(pow2(k) + pow2(k - 20)), k + 1);
        }
    }
}
