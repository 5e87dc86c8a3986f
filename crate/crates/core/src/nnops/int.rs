//! Integer-only kernels: bias alignment, int32 convolution, requantization,
//! ReLU and residual alignment.

use super::{ConvAttrs, ConvGeometry};
use crate::error::{Error, Result};
use crate::fixedpoint::{shift_round, QuantParams, QuantizedTensor};
use crate::tensor::Tensor;

/// Int32 values at scale `2^(−frac_bits)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    pub values: Tensor<i32>,
    pub frac_bits: i32,
}

/// Bias moved into the accumulator scale `2^(−N_x−N_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedBias {
    pub ints: Tensor<i32>,
    /// `(N_x + N_w) − N_b`; positive means the bias was shifted left.
    pub shift_applied: i32,
}

fn to_i32(v: i128, context: &str, index: usize) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::Overflow {
        context: context.into(),
        index,
    })
}

pub fn align_bias(b: &QuantizedTensor, n_x: i32, n_w: i32) -> Result<AlignedBias> {
    align_bias_by_shift(b, (n_x + n_w) - b.frac_bits())
}

/// Left shift when `shift ≥ 0` (exact, overflow is an error), rounding right
/// shift otherwise.
pub fn align_bias_by_shift(b: &QuantizedTensor, shift: i32) -> Result<AlignedBias> {
    let ints = b
        .ints()
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| to_i32(shift_round(i64::from(v), -shift), "bias alignment", i))
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignedBias {
        ints: Tensor::new(b.dims().to_vec(), ints)?,
        shift_applied: shift,
    })
}

/// Integer convolution. Returns the raw int32 accumulator whose real value is
/// `acc · 2^(−N_x−N_w)`; any int32 overflow during accumulation is an error.
pub fn conv2d_int(
    x: &QuantizedTensor,
    w: &QuantizedTensor,
    b: &AlignedBias,
    attrs: ConvAttrs,
) -> Result<Tensor<i32>> {
    let geo = ConvGeometry::new(x.dims(), w.dims(), b.ints.len(), attrs)?;
    let xd = x.ints().data();
    let wd = w.ints().data();
    let bd = b.ints.data();
    let out = geo.accumulate(
        |l| bd[l],
        |acc: i32, o, xi, wi| {
            xd[xi]
                .checked_mul(wd[wi])
                .and_then(|p| acc.checked_add(p))
                .ok_or(Error::Overflow {
                    context: "convolution accumulator".into(),
                    index: o,
                })
        },
    )?;
    Tensor::new(geo.out_dims(), out)
}

/// Accumulator at `acc_frac` to the output format, via a rounding shift and
/// saturation.
pub fn requantize(acc: &Tensor<i32>, acc_frac: i32, out: QuantParams) -> Result<QuantizedTensor> {
    requantize_by_shift(acc, acc_frac - out.frac_bits, out)
}

/// `shift = acc_frac − N_o`: right shift with rounding when positive, exact
/// left shift otherwise; then saturate to `out`'s range.
pub fn requantize_by_shift(
    acc: &Tensor<i32>,
    shift: i32,
    out: QuantParams,
) -> Result<QuantizedTensor> {
    out.validate()?;
    let ints = acc.map(|v| out.clamp(shift_round(i64::from(v), shift)));
    QuantizedTensor::new(ints, out)
}

pub fn relu_int(q: &QuantizedTensor) -> QuantizedTensor {
    let ints = q.ints().map(|v| v.max(0));
    QuantizedTensor::new(ints, q.params()).expect("relu keeps values in range")
}

pub fn relu_acc(acc: &mut Tensor<i32>) {
    for v in acc.data_mut() {
        *v = (*v).max(0);
    }
}

/// Adds two fixed-point tensors after shifting the coarser one left to the
/// finer scale. `align_shift = a_frac − b_frac`.
pub fn add_aligned(a: &Tensor<i32>, b: &Tensor<i32>, align_shift: i32) -> Result<Tensor<i32>> {
    if a.dims() != b.dims() {
        return Err(Error::dims("residual operands", a.dims(), b.dims()));
    }
    let (a_shift, b_shift) = if align_shift >= 0 {
        (0, align_shift)
    } else {
        (-align_shift, 0)
    };
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| {
            let sum = shift_round(i64::from(x), -a_shift) + shift_round(i64::from(y), -b_shift);
            to_i32(sum, "residual addition", i)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(a.dims().to_vec(), data)
}

/// Residual addition at `max(a.frac, b.frac)`; both alignments are exact.
pub fn residual_add_int(a: &QuantizedTensor, b: &QuantizedTensor) -> Result<Accumulator> {
    let values = add_aligned(a.ints(), b.ints(), a.frac_bits() - b.frac_bits())?;
    Ok(Accumulator {
        values,
        frac_bits: a.frac_bits().max(b.frac_bits()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::dequantize;

    fn q(dims: &[usize], ints: Vec<i32>, frac: i32) -> QuantizedTensor {
        QuantizedTensor::new(
            Tensor::new(dims.to_vec(), ints).unwrap(),
            QuantParams::signed(frac, 8).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn bias_alignment_examples() {
        let b = align_bias(&q(&[1], vec![1], 0), 2, 3).unwrap();
        assert_eq!((b.ints.data(), b.shift_applied), (&[32][..], 5));
        let b = align_bias(&q(&[1], vec![3], 4), 1, 2).unwrap();
        assert_eq!((b.ints.data(), b.shift_applied), (&[2][..], -1));
        let b = align_bias(&q(&[1], vec![-3], 4), 1, 2).unwrap();
        assert_eq!(b.ints.data(), &[-2]);
        for shift in [-20, -3, 0, 4, 20] {
            let b = align_bias_by_shift(&q(&[1], vec![0], 0), shift).unwrap();
            assert_eq!(b.ints.data(), &[0]);
        }
    }

    #[test]
    fn bias_alignment_overflow_is_an_error() {
        assert!(matches!(
            align_bias_by_shift(&q(&[1], vec![127], 0), 30),
            Err(Error::Overflow { .. })
        ));
    }

    #[test]
    fn int_conv_example() {
        let x = q(&[1, 1, 1, 1], vec![4], 2);
        let w = q(&[1, 1, 1, 1], vec![8], 3);
        let b = align_bias(&q(&[1], vec![1], 0), 2, 3).unwrap();
        let acc = conv2d_int(&x, &w, &b, ConvAttrs::default()).unwrap();
        assert_eq!(acc.data(), &[64]);
        assert_eq!(f64::from(acc.data()[0]) * 2f64.powi(-5), 2.0);

        let zero = q(&[1, 1, 2, 2], vec![0; 4], 2);
        let b0 = align_bias(&q(&[1], vec![0], 0), 2, 3).unwrap();
        let acc = conv2d_int(
            &zero,
            &q(&[1, 1, 1, 1], vec![5], 3),
            &b0,
            ConvAttrs::default(),
        )
        .unwrap();
        assert!(acc.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn int_conv_overflow_reports_index() {
        let x = QuantizedTensor::new(
            Tensor::new(vec![1, 1, 1, 2], vec![32767, 32767]).unwrap(),
            QuantParams::signed(0, 16).unwrap(),
        )
        .unwrap();
        let w = QuantizedTensor::new(
            Tensor::new(vec![2, 1, 1, 1], vec![1, 32767]).unwrap(),
            QuantParams::signed(0, 16).unwrap(),
        )
        .unwrap();
        let b = AlignedBias {
            ints: Tensor::new(vec![2], vec![0, i32::MAX - 1000]).unwrap(),
            shift_applied: 0,
        };
        match conv2d_int(&x, &w, &b, ConvAttrs::default()) {
            Err(Error::Overflow { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn requantize_examples() {
        let acc = Tensor::new(vec![1], vec![64]).unwrap();
        let s = |f| QuantParams::signed(f, 8).unwrap();
        assert_eq!(requantize(&acc, 5, s(5)).unwrap().ints().data(), &[64]);
        let o = requantize(&acc, 5, s(2)).unwrap();
        assert_eq!(o.ints().data(), &[8]);
        assert_eq!(dequantize(&o).data(), &[2.0]);
        let acc = Tensor::new(vec![1], vec![100]).unwrap();
        assert_eq!(requantize(&acc, 5, s(8)).unwrap().ints().data(), &[127]);
    }

    #[test]
    fn relu_examples() {
        let r = relu_int(&q(&[3], vec![-3, 0, 5], 0));
        assert_eq!(r.ints().data(), &[0, 0, 5]);
        let r = relu_int(&q(&[2], vec![-3, -1], 0));
        assert_eq!(r.ints().data(), &[0, 0]);
        let pos = q(&[2], vec![1, 7], 3);
        assert_eq!(relu_int(&pos), pos);
    }

    #[test]
    fn residual_examples() {
        let s = residual_add_int(&q(&[1], vec![5], 3), &q(&[1], vec![2], 1)).unwrap();
        assert_eq!((s.values.data(), s.frac_bits), (&[13][..], 3));
        let s = residual_add_int(&q(&[2], vec![5, -1], 2), &q(&[2], vec![2, 2], 2)).unwrap();
        assert_eq!(s.values.data(), &[7, 1]);
        let s = residual_add_int(&q(&[2], vec![0, 0], 4), &q(&[2], vec![3, -2], 1)).unwrap();
        assert_eq!((s.values.data(), s.frac_bits), (&[24, -16][..], 4));
        assert!(residual_add_int(&q(&[2], vec![0, 0], 0), &q(&[1], vec![0], 0)).is_err());
    }

    #[test]
    fn residual_overflow_is_an_error() {
        let a = Tensor::new(vec![1], vec![i32::MAX]).unwrap();
        let b = Tensor::new(vec![1], vec![1]).unwrap();
        assert!(matches!(
            add_aligned(&a, &b, 0),
            Err(Error::Overflow { .. })
        ));
        assert!(matches!(
            add_aligned(&a, &b, -1),
            Err(Error::Overflow { .. })
        ));
    }
}
