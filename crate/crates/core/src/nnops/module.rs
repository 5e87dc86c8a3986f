//! Unified modules: a convolution plus whatever ReLU / residual addition the
//! dataflow lets it absorb, quantized once at the module output.

use serde::{Deserialize, Serialize};

use super::int::{add_aligned, align_bias_by_shift, conv2d_int, relu_acc, requantize_by_shift};
use super::{conv2d_real, relu_real, ConvAttrs};
use crate::error::{Error, Result};
use crate::fixedpoint::{pow2, quantize_tensor, round_nearest, QuantParams, QuantizedTensor};
use crate::tensor::Tensor;

/// The four fusion patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionCase {
    /// (a) convolution alone.
    #[serde(rename = "a")]
    ConvOnly,
    /// (b) convolution followed by ReLU.
    #[serde(rename = "b")]
    ConvRelu,
    /// (c) convolution plus shortcut, then ReLU.
    #[serde(rename = "c")]
    ResidualRelu,
    /// (d) convolution plus shortcut, no ReLU.
    #[serde(rename = "d")]
    ResidualNoRelu,
}

/// One step of a module's execution plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Conv,
    AddShortcut,
    Relu,
    Quantize,
}

impl FusionCase {
    pub const ALL: [FusionCase; 4] = [
        FusionCase::ConvOnly,
        FusionCase::ConvRelu,
        FusionCase::ResidualRelu,
        FusionCase::ResidualNoRelu,
    ];

    /// Execution plan shared by the integer and float-emulation paths.
    pub fn stages(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            FusionCase::ConvOnly => &[Conv, Quantize],
            FusionCase::ConvRelu => &[Conv, Relu, Quantize],
            FusionCase::ResidualRelu => &[Conv, AddShortcut, Relu, Quantize],
            FusionCase::ResidualNoRelu => &[Conv, AddShortcut, Quantize],
        }
    }

    pub fn has_relu(self) -> bool {
        matches!(self, FusionCase::ConvRelu | FusionCase::ResidualRelu)
    }

    pub fn has_residual(self) -> bool {
        matches!(self, FusionCase::ResidualRelu | FusionCase::ResidualNoRelu)
    }

    /// Post-ReLU outputs are stored unsigned.
    pub fn output_signed(self) -> bool {
        !self.has_relu()
    }

    pub fn output_params(self, frac_bits: i32, bit_width: u32) -> Result<QuantParams> {
        QuantParams::new(frac_bits, bit_width, self.output_signed())
    }

    pub fn label(self) -> &'static str {
        match self {
            FusionCase::ConvOnly => "a",
            FusionCase::ConvRelu => "b",
            FusionCase::ResidualRelu => "c",
            FusionCase::ResidualNoRelu => "d",
        }
    }
}

/// Quantized parameters of a module's convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedConv {
    pub weight: QuantizedTensor,
    pub bias: QuantizedTensor,
    pub attrs: ConvAttrs,
}

/// Shift amounts that drive integer execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleShifts {
    /// `(N_x + N_w) − N_b`.
    pub bias_align: i32,
    /// `(N_x + N_w) − N_shortcut`, residual modules only.
    pub residual_align: Option<i32>,
    /// `(N_x + N_w) − N_o`.
    pub requant: i32,
}

impl ModuleShifts {
    pub fn from_frac_bits(
        n_x: i32,
        n_w: i32,
        n_b: i32,
        shortcut_frac: Option<i32>,
        n_o: i32,
    ) -> Self {
        let acc = n_x + n_w;
        Self {
            bias_align: acc - n_b,
            residual_align: shortcut_frac.map(|s| acc - s),
            requant: acc - n_o,
        }
    }
}

fn check_operands(
    case: FusionCase,
    shortcut: Option<&QuantizedTensor>,
    out: QuantParams,
) -> Result<()> {
    if case.has_residual() != shortcut.is_some() {
        return Err(Error::InvalidParams(format!(
            "case ({}) {} a shortcut operand",
            case.label(),
            if case.has_residual() {
                "requires"
            } else {
                "takes no"
            }
        )));
    }
    if out.signed != case.output_signed() {
        return Err(Error::InvalidParams(format!(
            "case ({}) output must be {}",
            case.label(),
            if case.output_signed() {
                "signed"
            } else {
                "unsigned"
            }
        )));
    }
    out.validate()
}

/// Integer execution of a module from fractional bits.
pub fn run_unified_module_int(
    case: FusionCase,
    x: &QuantizedTensor,
    conv: &QuantizedConv,
    shortcut: Option<&QuantizedTensor>,
    out: QuantParams,
) -> Result<QuantizedTensor> {
    let shifts = ModuleShifts::from_frac_bits(
        x.frac_bits(),
        conv.weight.frac_bits(),
        conv.bias.frac_bits(),
        shortcut.map(QuantizedTensor::frac_bits),
        out.frac_bits,
    );
    run_unified_module_int_with_shifts(case, x, conv, shortcut, shifts, out)
}

/// Integer execution driven only by precomputed shifts; the fractional bits
/// carried by the operands are not consulted.
pub fn run_unified_module_int_with_shifts(
    case: FusionCase,
    x: &QuantizedTensor,
    conv: &QuantizedConv,
    shortcut: Option<&QuantizedTensor>,
    shifts: ModuleShifts,
    out: QuantParams,
) -> Result<QuantizedTensor> {
    check_operands(case, shortcut, out)?;
    let mut acc: Option<Tensor<i32>> = None;
    // Extra left shift applied to the accumulator when the shortcut is finer.
    let mut widened = 0;
    for stage in case.stages() {
        match stage {
            Stage::Conv => {
                let bias = align_bias_by_shift(&conv.bias, shifts.bias_align)?;
                acc = Some(conv2d_int(x, &conv.weight, &bias, conv.attrs)?);
            }
            Stage::AddShortcut => {
                let (Some(a), Some(s)) = (acc.as_ref(), shortcut) else {
                    unreachable!("shortcut checked above");
                };
                let align = shifts.residual_align.ok_or_else(|| {
                    Error::InvalidParams("missing residual alignment shift".into())
                })?;
                acc = Some(add_aligned(a, s.ints(), align)?);
                widened = (-align).max(0);
            }
            Stage::Relu => relu_acc(acc.as_mut().expect("conv runs first")),
            Stage::Quantize => {
                let a = acc.as_ref().expect("conv runs first");
                return requantize_by_shift(a, shifts.requant + widened, out);
            }
        }
    }
    unreachable!("every plan ends with a quantize stage")
}

/// Bias real values snapped to the accumulator grid `2^(−acc_frac)` the same
/// way integer alignment does.
pub fn aligned_bias_real(bias: &[f64], acc_frac: i32) -> Result<Vec<f64>> {
    bias.iter()
        .enumerate()
        .map(|(i, &b)| {
            let v = round_nearest(b * pow2(acc_frac));
            check_i32(v, "bias alignment", i)?;
            Ok(v * pow2(-acc_frac))
        })
        .collect()
}

fn check_i32(v: f64, context: &str, index: usize) -> Result<()> {
    if v < f64::from(i32::MIN) || v > f64::from(i32::MAX) {
        return Err(Error::Overflow {
            context: context.into(),
            index,
        });
    }
    Ok(())
}

fn check_grid(t: &Tensor<f64>, frac: i32, context: &str) -> Result<()> {
    let scale = pow2(frac);
    for (i, &v) in t.data().iter().enumerate() {
        check_i32(v * scale, context, i)?;
    }
    Ok(())
}

/// The same module evaluated on dequantized operands in f64 and quantized
/// once with [`quantize_tensor`]. Every intermediate is exactly
/// representable, so the result matches the integer path bit for bit.
pub fn run_unified_module_float(
    case: FusionCase,
    x: &QuantizedTensor,
    conv: &QuantizedConv,
    shortcut: Option<&QuantizedTensor>,
    out: QuantParams,
) -> Result<QuantizedTensor> {
    check_operands(case, shortcut, out)?;
    let mut acc: Option<Tensor<f64>> = None;
    let mut frac = x.frac_bits() + conv.weight.frac_bits();
    for stage in case.stages() {
        match stage {
            Stage::Conv => {
                let bias = aligned_bias_real(conv.bias.to_real().data(), frac)?;
                let o = conv2d_real(&x.to_real(), &conv.weight.to_real(), &bias, conv.attrs)?;
                check_grid(&o, frac, "convolution accumulator")?;
                acc = Some(o);
            }
            Stage::AddShortcut => {
                let (Some(a), Some(s)) = (acc.as_mut(), shortcut) else {
                    unreachable!("shortcut checked above");
                };
                if a.dims() != s.dims() {
                    return Err(Error::dims("residual operands", a.dims(), s.dims()));
                }
                for (v, r) in a.data_mut().iter_mut().zip(s.to_real().data()) {
                    *v += r;
                }
                frac = frac.max(s.frac_bits());
                check_grid(a, frac, "residual addition")?;
            }
            Stage::Relu => relu_real(acc.as_mut().expect("conv runs first")),
            Stage::Quantize => {
                return quantize_tensor(acc.as_ref().expect("conv runs first"), out);
            }
        }
    }
    unreachable!("every plan ends with a quantize stage")
}
