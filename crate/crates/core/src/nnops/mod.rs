//! Convolution kernels.
//!
//! Two execution paths share one geometry: a real-valued reference path
//! (accumulating in f64) and a bit-exact integer path that accumulates int8
//! products in checked int32 and rescales only by shifts.

mod int;
mod module;

pub use int::{
    add_aligned, align_bias, align_bias_by_shift, conv2d_int, relu_acc, relu_int, requantize,
    requantize_by_shift, residual_add_int, Accumulator, AlignedBias,
};
pub use module::{
    aligned_bias_real, run_unified_module_float, run_unified_module_int,
    run_unified_module_int_with_shifts, FusionCase, ModuleShifts, QuantizedConv, Stage,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvAttrs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

impl ConvAttrs {
    pub fn new(stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidGraph("convolution stride must be ≥ 1".into()));
        }
        Ok(Self { stride, padding })
    }

    /// Output extent along one axis, or `None` if it would be empty.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// Validated shapes for one convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], bias_len: usize, attrs: ConvAttrs) -> Result<Self> {
        let (&[batch, in_ch, in_h, in_w], &[out_ch, w_ch, k_h, k_w]) = (x, w) else {
            return Err(Error::dims("convolution operands must be rank 4", x, w));
        };
        if in_ch != w_ch {
            return Err(Error::dims("input channels vs filter channels", x, w));
        }
        if bias_len != out_ch {
            return Err(Error::dims(
                "bias length vs output channels",
                &[bias_len],
                w,
            ));
        }
        if attrs.stride == 0 {
            return Err(Error::InvalidGraph("convolution stride must be ≥ 1".into()));
        }
        let (Some(out_h), Some(out_w)) = (attrs.out_extent(in_h, k_h), attrs.out_extent(in_w, k_w))
        else {
            return Err(Error::dims("kernel larger than padded input", x, w));
        };
        Ok(Self {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            k_h,
            k_w,
            out_h,
            out_w,
            stride: attrs.stride,
            pad: attrs.padding,
        })
    }

    pub fn out_dims(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }

    /// Runs one accumulation per output element: `init(channel)` seeds it and
    /// `tap(acc, out, x_index, w_index)` folds in each in-bounds tap, in a fixed
    /// (channel, row, column) order.
    pub fn accumulate<A, E>(
        &self,
        init: impl Fn(usize) -> A,
        mut tap: impl FnMut(A, usize, usize, usize) -> std::result::Result<A, E>,
    ) -> std::result::Result<Vec<A>, E> {
        let mut out = Vec::with_capacity(self.batch * self.out_ch * self.out_h * self.out_w);
        for n in 0..self.batch {
            for l in 0..self.out_ch {
                for m in 0..self.out_h {
                    for q in 0..self.out_w {
                        let o = out.len();
                        let mut acc = init(l);
                        for k in 0..self.in_ch {
                            let x_base = (n * self.in_ch + k) * self.in_h;
                            let w_base = (l * self.in_ch + k) * self.k_h;
                            for i in 0..self.k_h {
                                let Some(ih) = (m * self.stride + i).checked_sub(self.pad) else {
                                    continue;
                                };
                                if ih >= self.in_h {
                                    continue;
                                }
                                let x_row = (x_base + ih) * self.in_w;
                                let w_row = (w_base + i) * self.k_w;
                                for j in 0..self.k_w {
                                    let Some(iw) = (q * self.stride + j).checked_sub(self.pad)
                                    else {
                                        continue;
                                    };
                                    if iw >= self.in_w {
                                        continue;
                                    }
                                    acc = tap(acc, o, x_row + iw, w_row + j)?;
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Real-valued convolution with zero padding, accumulated in f64.
pub fn conv2d_real(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: &[f64],
    attrs: ConvAttrs,
) -> Result<Tensor<f64>> {
    let geo = ConvGeometry::new(x.dims(), w.dims(), bias.len(), attrs)?;
    let xd = x.data();
    let wd = w.data();
    let out = geo.accumulate(
        |l| bias[l],
        |acc, _, xi, wi| Ok::<_, std::convert::Infallible>(acc + xd[xi] * wd[wi]),
    );
    let Ok(out) = out;
    Tensor::new(geo.out_dims(), out)
}

/// Float32 reference convolution: `O[l,m,n] = B[l] + Σ X[k, S·m+i, S·n+j] · W[l,k,i,j]`.
pub fn conv2d_float(
    x: &Tensor<f32>,
    w: &Tensor<f32>,
    b: &[f32],
    attrs: ConvAttrs,
) -> Result<Tensor<f32>> {
    let bias: Vec<f64> = b.iter().map(|&v| f64::from(v)).collect();
    Ok(conv2d_real(&x.to_f64(), &w.to_f64(), &bias, attrs)?.to_f32())
}

pub fn relu_real(t: &mut Tensor<f64>) {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
}
