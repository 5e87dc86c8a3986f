//! Quantized models and their execution engines.
//!
//! A [`QuantizedModel`] holds only integer weights and biases, the shift
//! amounts that connect their formats, and the input format. The integer
//! engine executes modules purely from those shifts; the emulation engine
//! evaluates the same model on dequantized values and must agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::calibrate::{quantize_conv, CalibrationResult};
use crate::error::{Error, Result};
use crate::fixedpoint::{dequantize, quantize_tensor, QuantParams, QuantizedTensor};
use crate::graph::{Graph, NodeId, Op, UnifiedModule};
use crate::nnops::{
    run_unified_module_float, run_unified_module_int_with_shifts, FusionCase, ModuleShifts,
    QuantizedConv,
};
use crate::tensor::Tensor;

/// Where a module operand comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Input,
    Module(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModule {
    /// Convolution node name.
    pub name: String,
    /// Graph node whose value this module produces.
    pub output_node: String,
    pub case: FusionCase,
    pub input: Source,
    pub shortcut: Option<Source>,
    pub conv: QuantizedConv,
    pub n_x: i32,
    pub n_o: i32,
    pub n_shortcut: Option<i32>,
    pub shifts: ModuleShifts,
}

impl QuantizedModule {
    pub fn n_w(&self) -> i32 {
        self.conv.weight.frac_bits()
    }

    pub fn n_b(&self) -> i32 {
        self.conv.bias.frac_bits()
    }

    pub fn output_params(&self) -> Result<QuantParams> {
        self.case
            .output_params(self.n_o, self.conv.weight.params().bit_width)
    }

    /// Every shift amount the module stores.
    pub fn shift_amounts(&self) -> Vec<i32> {
        let mut v = vec![self.shifts.bias_align];
        v.extend(self.shifts.residual_align);
        v.push(self.shifts.requant);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub bit_width: u32,
    pub input_params: QuantParams,
    /// (C, H, W) of one input sample.
    pub input_dims: [usize; 3],
    pub modules: Vec<QuantizedModule>,
    pub output: Source,
}

impl QuantizedModel {
    /// Checks structure and that stored shifts agree with stored formats.
    pub fn validate(&self) -> Result<()> {
        self.input_params.validate()?;
        let src_frac = |s: Source, at: usize| -> Result<i32> {
            match s {
                Source::Input => Ok(self.input_params.frac_bits),
                Source::Module(j) if j < at => Ok(self.modules[j].n_o),
                Source::Module(j) => Err(Error::InvalidGraph(format!(
                    "module #{at} reads module #{j}, which is not computed earlier"
                ))),
            }
        };
        for (i, m) in self.modules.iter().enumerate() {
            let fail = |what: &str| {
                Err(Error::InvalidParams(format!(
                    "module `{}`: {what} inconsistent with stored fractional bits",
                    m.name
                )))
            };
            if m.conv.weight.params().bit_width != self.bit_width
                || m.conv.bias.params().bit_width != self.bit_width
            {
                return fail("bit width");
            }
            if src_frac(m.input, i)? != m.n_x {
                return fail("input format");
            }
            if m.case.has_residual() != m.shortcut.is_some() {
                return fail("shortcut presence");
            }
            let n_s = m.shortcut.map(|s| src_frac(s, i)).transpose()?;
            if n_s != m.n_shortcut {
                return fail("shortcut format");
            }
            let expected = ModuleShifts::from_frac_bits(m.n_x, m.n_w(), m.n_b(), n_s, m.n_o);
            if expected != m.shifts {
                return fail("shift amounts");
            }
        }
        if let Source::Module(j) = self.output {
            if j >= self.modules.len() {
                return Err(Error::InvalidGraph(format!(
                    "output reads missing module #{j}"
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        let [_, c, h, w] = x.nchw()?;
        if [c, h, w] != self.input_dims {
            return Err(Error::dims("network input", x.dims(), &self.input_dims));
        }
        Ok(())
    }

    pub fn quantize_input(&self, x: &Tensor<f32>) -> Result<QuantizedTensor> {
        self.check_input(x)?;
        quantize_tensor(x, self.input_params)
    }

    fn run_with<F>(&self, x: &Tensor<f32>, mut step: F) -> Result<Vec<QuantizedTensor>>
    where
        F: FnMut(
            &QuantizedModule,
            &QuantizedTensor,
            Option<&QuantizedTensor>,
        ) -> Result<QuantizedTensor>,
    {
        let xq = self.quantize_input(x)?;
        let mut outs: Vec<QuantizedTensor> = Vec::with_capacity(self.modules.len());
        for m in &self.modules {
            let get = |s: Source| match s {
                Source::Input => &xq,
                Source::Module(j) => &outs[j],
            };
            let y = step(m, get(m.input), m.shortcut.map(get))?;
            outs.push(y);
        }
        outs.push(xq);
        Ok(outs)
    }

    fn pick_output(&self, mut all: Vec<QuantizedTensor>) -> QuantizedTensor {
        match self.output {
            Source::Input => all.pop().expect("input appended"),
            Source::Module(j) => all.swap_remove(j),
        }
    }

    /// Integer-only execution; returns every module output followed by the
    /// quantized network input.
    pub fn run_int_all(&self, x: &Tensor<f32>) -> Result<Vec<QuantizedTensor>> {
        self.run_with(x, |m, input, shortcut| {
            run_unified_module_int_with_shifts(
                m.case,
                input,
                &m.conv,
                shortcut,
                m.shifts,
                m.output_params()?,
            )
        })
    }

    pub fn run_int(&self, x: &Tensor<f32>) -> Result<QuantizedTensor> {
        Ok(self.pick_output(self.run_int_all(x)?))
    }

    /// Float-emulation execution of the same model.
    pub fn run_emulated_all(&self, x: &Tensor<f32>) -> Result<Vec<QuantizedTensor>> {
        self.run_with(x, |m, input, shortcut| {
            run_unified_module_float(m.case, input, &m.conv, shortcut, m.output_params()?)
        })
    }

    pub fn run_emulated(&self, x: &Tensor<f32>) -> Result<QuantizedTensor> {
        Ok(self.pick_output(self.run_emulated_all(x)?))
    }

    /// Integer inference, dequantized to float32.
    pub fn infer(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(dequantize(&self.run_int(x)?))
    }

    pub fn all_shift_amounts(&self) -> Vec<i32> {
        self.modules
            .iter()
            .flat_map(|m| m.shift_amounts())
            .collect()
    }
}

/// Assembles a quantized model from calibrated fractional bits.
pub fn build_quantized_model(
    g: &Graph,
    modules: &[UnifiedModule],
    calib: &CalibrationResult,
) -> Result<QuantizedModel> {
    if calib.modules.len() != modules.len() {
        return Err(Error::InvalidParams(
            "calibration result does not match the module list".into(),
        ));
    }
    let bits = calib.bit_width;
    let input_params = QuantParams::signed(calib.input.frac_bits, bits)?;
    let source_of = |id: NodeId| -> Result<Source> {
        if id == g.input_id() {
            return Ok(Source::Input);
        }
        modules
            .iter()
            .position(|m| m.output == id)
            .map(Source::Module)
            .ok_or_else(|| {
                Error::InvalidGraph(format!("`{}` is not a module output", g.node(id).name))
            })
    };
    let mut out = Vec::with_capacity(modules.len());
    for (m, c) in modules.iter().zip(&calib.modules) {
        let Op::Conv(conv) = &g.node(m.conv).op else {
            return Err(Error::InvalidGraph(
                "module is not anchored on a conv".into(),
            ));
        };
        let qconv = quantize_conv(conv, c.n_w, c.n_b, bits)?;
        out.push(QuantizedModule {
            name: g.node(m.conv).name.clone(),
            output_node: g.node(m.output).name.clone(),
            case: m.case,
            input: source_of(m.input)?,
            shortcut: m.shortcut.map(source_of).transpose()?,
            conv: qconv,
            n_x: c.n_x,
            n_o: c.n_o,
            n_shortcut: c.n_shortcut,
            shifts: ModuleShifts::from_frac_bits(c.n_x, c.n_w, c.n_b, c.n_shortcut, c.n_o),
        });
    }
    let model = QuantizedModel {
        bit_width: bits,
        input_params,
        input_dims: g.input_dims(),
        modules: out,
        output: source_of(g.node(g.output_id()).inputs[0])?,
    };
    model.validate()?;
    Ok(model)
}

/// Folds, fuses, calibrates and assembles in one call.
pub fn quantize_graph(
    g: &Graph,
    cfg: &crate::calibrate::CalibConfig,
) -> Result<(QuantizedModel, CalibrationResult)> {
    let folded = crate::graph::fold_bn(g)?;
    let modules = crate::graph::fuse(&folded)?;
    let calib = crate::calibrate::calibrate_graph(&folded, &modules, cfg)?;
    let model = build_quantized_model(&folded, &modules, &calib)?;
    Ok((model, calib))
}
