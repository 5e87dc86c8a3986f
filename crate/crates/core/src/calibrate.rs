//! Reconstruction-error grid search for fractional bits.
//!
//! For each unified module, in topological order, the search tries every
//! `(N_w, N_b, N_o)` in the windows derived from the float weights, bias and
//! reference output and keeps the triple with the smallest L2 distance
//! between the float reference output and the quantized module output.
//! Each module consumes the *quantized* output of its producers, so the
//! input format `N_x` is always the upstream module's chosen `N_o`.
//!
//! Candidates are scored with the float-emulation path, which is bit-exact
//! with the integer engine. The convolution of the quantized input with the
//! quantized weights depends only on `N_w`, so it is computed once per weight
//! candidate and reused across the bias and output loops.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fixedpoint::{
    max_frac_window, pow2, quantize_tensor, tensor_frac_window, FracWindow, QuantParams,
    QuantizedTensor,
};
use crate::graph::{ConvLayer, Graph, Op, UnifiedModule};
use crate::nnops::{
    aligned_bias_real, conv2d_real, run_unified_module_float, FusionCase, QuantizedConv,
};
use crate::tensor::Tensor;

pub const DEFAULT_BIT_WIDTH: u32 = 8;
pub const DEFAULT_TAU: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchConfig {
    pub bit_width: u32,
    pub tau: u32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            bit_width: DEFAULT_BIT_WIDTH,
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibConfig {
    pub search: SearchConfig,
    /// Single-sample calibration tensors. Errors are summed across them.
    pub calib_inputs: Vec<Tensor<f32>>,
}

impl CalibConfig {
    pub fn new(calib_inputs: Vec<Tensor<f32>>) -> Self {
        Self {
            search: SearchConfig::default(),
            calib_inputs,
        }
    }

    pub fn with_bits(mut self, bit_width: u32) -> Self {
        self.search.bit_width = bit_width;
        self
    }

    pub fn with_tau(mut self, tau: u32) -> Self {
        self.search.tau = tau;
        self
    }

    fn validate(&self) -> Result<()> {
        QuantParams::signed(0, self.search.bit_width)?;
        if self.calib_inputs.is_empty() {
            return Err(Error::InvalidParams(
                "at least one calibration input is required".into(),
            ));
        }
        Ok(())
    }
}

/// One module's search problem.
#[derive(Debug, Clone, Copy)]
pub struct ModuleProblem<'a> {
    pub case: FusionCase,
    pub conv: &'a ConvLayer,
    /// Quantized module input, one per calibration sample.
    pub inputs: &'a [QuantizedTensor],
    /// Quantized shortcut operand per sample (cases c and d).
    pub shortcuts: Option<&'a [QuantizedTensor]>,
    /// Float reference output per sample.
    pub reference: &'a [Tensor<f64>],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleSearch {
    pub n_w: i32,
    pub n_b: i32,
    pub n_o: i32,
    /// Sum over samples of `‖O − O_q‖₂`.
    pub error: f64,
    pub evaluations: usize,
    pub windows: [FracWindow; 3],
}

/// L2 distance between a reference and a quantized tensor's real values.
pub fn l2_error(reference: &Tensor<f64>, q: &QuantizedTensor) -> f64 {
    let scale = pow2(-q.frac_bits());
    reference
        .data()
        .iter()
        .zip(q.ints().data())
        .map(|(&r, &v)| {
            let d = r - f64::from(v) * scale;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn reference_window(reference: &[Tensor<f64>], cfg: SearchConfig) -> FracWindow {
    let max_abs = reference.iter().fold(0.0f64, |m, t| m.max(t.max_abs()));
    max_frac_window(max_abs, cfg.bit_width, cfg.tau)
}

fn check_problem(p: &ModuleProblem) -> Result<()> {
    let n = p.inputs.len();
    if n == 0 || p.reference.len() != n || p.shortcuts.is_some_and(|s| s.len() != n) {
        return Err(Error::InvalidParams(
            "module problem needs one input, reference and shortcut per sample".into(),
        ));
    }
    if p.case.has_residual() != p.shortcuts.is_some() {
        return Err(Error::InvalidParams(format!(
            "case ({}) shortcut presence mismatch",
            p.case.label()
        )));
    }
    let n_x = p.inputs[0].frac_bits();
    if p.inputs.iter().any(|x| x.frac_bits() != n_x) {
        return Err(Error::InvalidParams(
            "calibration samples disagree on the input format".into(),
        ));
    }
    Ok(())
}

/// Grid search over the three windows for one module.
///
/// Loop order is weights (outer), bias, output (inner), each in ascending
/// window index; a candidate replaces the incumbent only when its error is
/// strictly smaller, so the first minimizer in that order wins. Candidates
/// whose int32 accumulator would overflow are skipped (they are not
/// executable); saturating candidates are scored normally.
pub fn calibrate_module(p: &ModuleProblem, cfg: SearchConfig) -> Result<ModuleSearch> {
    check_problem(p)?;
    let bits = cfg.bit_width;
    let w_window = tensor_frac_window(&p.conv.weight, bits, cfg.tau);
    let bias_t = Tensor::new(vec![p.conv.bias.len()], p.conv.bias.clone())?;
    let b_window = tensor_frac_window(&bias_t, bits, cfg.tau);
    let o_window = reference_window(p.reference, cfg);

    let n_x = p.inputs[0].frac_bits();
    let x_real: Vec<Tensor<f64>> = p.inputs.iter().map(QuantizedTensor::to_real).collect();
    let s_real: Option<Vec<Tensor<f64>>> = p
        .shortcuts
        .map(|s| s.iter().map(QuantizedTensor::to_real).collect());
    let s_frac = p.shortcuts.map(|s| s[0].frac_bits());
    let b_cands: Vec<(i32, Vec<f64>)> = b_window
        .candidates()
        .map(|n_b| {
            let q = quantize_tensor(&bias_t, QuantParams::signed(n_b, bits)?)?;
            Ok((n_b, q.to_real().into_data()))
        })
        .collect::<Result<_>>()?;
    let o_params: Vec<QuantParams> = o_window
        .candidates()
        .map(|n_o| p.case.output_params(n_o, bits))
        .collect::<Result<_>>()?;
    let zero_bias = vec![0.0; p.conv.out_channels()];

    // errors[w][b][o], infinity for non-executable candidates.
    let w_cands: Vec<i32> = w_window.candidates().collect();
    let errors: Vec<Vec<Vec<f64>>> = w_cands
        .par_iter()
        .map(|&n_w| -> Result<Vec<Vec<f64>>> {
            let w_q = quantize_tensor(&p.conv.weight, QuantParams::signed(n_w, bits)?)?;
            let w_real = w_q.to_real();
            let raw: Vec<Tensor<f64>> = x_real
                .iter()
                .map(|x| conv2d_real(x, &w_real, &zero_bias, p.conv.attrs))
                .collect::<Result<_>>()?;
            let acc_frac = n_x + n_w;
            let mut per_w = Vec::with_capacity(b_cands.len());
            for (_, b_real) in &b_cands {
                let finished = finish_module(p.case, &raw, b_real, acc_frac, &s_real, s_frac);
                let row = match finished {
                    Some(outs) => o_params
                        .iter()
                        .map(|&op| {
                            outs.iter()
                                .zip(p.reference)
                                .map(|(o, r)| Ok(l2_error(r, &quantize_tensor(o, op)?)))
                                .sum::<Result<f64>>()
                        })
                        .collect::<Result<Vec<f64>>>()?,
                    None => vec![f64::INFINITY; o_params.len()],
                };
                per_w.push(row);
            }
            Ok(per_w)
        })
        .collect::<Result<_>>()?;

    let mut best: Option<(i32, i32, i32, f64)> = None;
    let mut best_err = f64::INFINITY;
    for (wi, &n_w) in w_cands.iter().enumerate() {
        for (bi, &(n_b, _)) in b_cands.iter().enumerate() {
            for (oi, op) in o_params.iter().enumerate() {
                let e = errors[wi][bi][oi];
                if best_err > e {
                    best_err = e;
                    best = Some((n_w, n_b, op.frac_bits, e));
                }
            }
        }
    }
    let (n_w, n_b, n_o, error) = best.ok_or_else(|| Error::Overflow {
        context: "every calibration candidate overflows the int32 accumulator".into(),
        index: 0,
    })?;
    Ok(ModuleSearch {
        n_w,
        n_b,
        n_o,
        error,
        evaluations: w_window.len() * b_window.len() * o_window.len(),
        windows: [w_window, b_window, o_window],
    })
}

/// Adds the aligned bias (and shortcut, and ReLU) to raw convolution sums.
/// `None` when an intermediate leaves the int32 accumulator range.
fn finish_module(
    case: FusionCase,
    raw: &[Tensor<f64>],
    bias_real: &[f64],
    acc_frac: i32,
    shortcuts: &Option<Vec<Tensor<f64>>>,
    shortcut_frac: Option<i32>,
) -> Option<Vec<Tensor<f64>>> {
    let bias = aligned_bias_real(bias_real, acc_frac).ok()?;
    let limit = |frac: i32| f64::from(i32::MAX) * pow2(-frac);
    let low = |frac: i32| f64::from(i32::MIN) * pow2(-frac);
    let mut outs = Vec::with_capacity(raw.len());
    for (n, r) in raw.iter().enumerate() {
        let [_, c, h, w] = r.nchw().ok()?;
        let plane = h * w;
        let mut o = r.clone();
        for (i, v) in o.data_mut().iter_mut().enumerate() {
            *v += bias[(i / plane) % c];
        }
        if o.data()
            .iter()
            .any(|&v| v > limit(acc_frac) || v < low(acc_frac))
        {
            return None;
        }
        if case.has_residual() {
            let s = &shortcuts.as_ref()?[n];
            let frac = acc_frac.max(shortcut_frac?);
            for (v, sv) in o.data_mut().iter_mut().zip(s.data()) {
                *v += sv;
            }
            if o.data().iter().any(|&v| v > limit(frac) || v < low(frac)) {
                return None;
            }
        }
        if case.has_relu() {
            for v in o.data_mut() {
                *v = v.max(0.0);
            }
        }
        outs.push(o);
    }
    Some(outs)
}

/// 1-D search for the network input's fractional bits.
pub fn calibrate_input(inputs: &[Tensor<f64>], cfg: SearchConfig) -> Result<InputCalibration> {
    let window = reference_window(inputs, cfg);
    let mut best = None;
    let mut best_err = f64::INFINITY;
    for n in window.candidates() {
        let p = QuantParams::signed(n, cfg.bit_width)?;
        let e = inputs
            .iter()
            .map(|x| Ok(l2_error(x, &quantize_tensor(x, p)?)))
            .sum::<Result<f64>>()?;
        if best_err > e {
            best_err = e;
            best = Some(n);
        }
    }
    Ok(InputCalibration {
        frac_bits: best.expect("window is never empty"),
        error: best_err,
        evaluations: window.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputCalibration {
    pub frac_bits: i32,
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleCalibration {
    /// Name of the module's convolution node.
    pub name: String,
    pub case: FusionCase,
    pub n_x: i32,
    pub n_w: i32,
    pub n_b: i32,
    pub n_o: i32,
    pub n_shortcut: Option<i32>,
    pub error: f64,
    pub evaluations: usize,
    /// Mean squared error between the float and quantized module outputs.
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationResult {
    pub bit_width: u32,
    pub tau: u32,
    pub input: InputCalibration,
    pub modules: Vec<ModuleCalibration>,
}

impl CalibrationResult {
    /// Module candidate evaluations (the input search is not included).
    pub fn total_evaluations(&self) -> usize {
        self.modules.iter().map(|m| m.evaluations).sum()
    }
}

fn mse(reference: &[Tensor<f64>], q: &[QuantizedTensor]) -> f64 {
    let (sum, count) = reference
        .iter()
        .zip(q)
        .fold((0.0, 0usize), |(s, c), (r, q)| {
            let e = l2_error(r, q);
            (s + e * e, c + r.len())
        });
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Calibrates every module of a bn-free graph in topological order.
pub fn calibrate_graph(
    g: &Graph,
    modules: &[UnifiedModule],
    cfg: &CalibConfig,
) -> Result<CalibrationResult> {
    cfg.validate()?;
    let search = cfg.search;
    let inputs: Vec<Tensor<f64>> = cfg.calib_inputs.iter().map(Tensor::to_f64).collect();
    let acts: Vec<Vec<Tensor<f64>>> = inputs
        .iter()
        .map(|x| g.run_float(x))
        .collect::<Result<_>>()?;

    let input = calibrate_input(&inputs, search)?;
    let in_params = QuantParams::signed(input.frac_bits, search.bit_width)?;
    let mut values: Vec<Option<Vec<QuantizedTensor>>> = vec![None; g.len()];
    values[g.input_id()] = Some(
        inputs
            .iter()
            .map(|x| quantize_tensor(x, in_params))
            .collect::<Result<_>>()?,
    );

    let mut results = Vec::with_capacity(modules.len());
    for m in modules {
        let Op::Conv(conv) = &g.node(m.conv).op else {
            return Err(Error::InvalidGraph(
                "module is not anchored on a conv".into(),
            ));
        };
        let fetch = |id: usize| {
            values[id].as_ref().ok_or_else(|| {
                Error::InvalidGraph(format!(
                    "`{}` is used before it is produced",
                    g.node(id).name
                ))
            })
        };
        let xs = fetch(m.input)?;
        let shortcuts = m.shortcut.map(fetch).transpose()?;
        let reference: Vec<Tensor<f64>> = acts.iter().map(|a| a[m.output].clone()).collect();
        let problem = ModuleProblem {
            case: m.case,
            conv,
            inputs: xs,
            shortcuts: shortcuts.map(Vec::as_slice),
            reference: &reference,
        };
        let found = calibrate_module(&problem, search)?;
        let qconv = quantize_conv(conv, found.n_w, found.n_b, search.bit_width)?;
        let out_params = m.case.output_params(found.n_o, search.bit_width)?;
        let outs: Vec<QuantizedTensor> = (0..xs.len())
            .map(|i| {
                run_unified_module_float(
                    m.case,
                    &xs[i],
                    &qconv,
                    shortcuts.map(|s| &s[i]),
                    out_params,
                )
            })
            .collect::<Result<_>>()?;
        results.push(ModuleCalibration {
            name: g.node(m.conv).name.clone(),
            case: m.case,
            n_x: xs[0].frac_bits(),
            n_w: found.n_w,
            n_b: found.n_b,
            n_o: found.n_o,
            n_shortcut: shortcuts.map(|s| s[0].frac_bits()),
            error: found.error,
            evaluations: found.evaluations,
            mse: mse(&reference, &outs),
        });
        values[m.output] = Some(outs);
    }
    Ok(CalibrationResult {
        bit_width: search.bit_width,
        tau: search.tau,
        input,
        modules: results,
    })
}

/// Quantizes a float convolution's weights and bias (both signed).
pub fn quantize_conv(
    conv: &ConvLayer,
    n_w: i32,
    n_b: i32,
    bit_width: u32,
) -> Result<QuantizedConv> {
    let bias = Tensor::new(vec![conv.bias.len()], conv.bias.clone())?;
    Ok(QuantizedConv {
        weight: quantize_tensor(&conv.weight, QuantParams::signed(n_w, bit_width)?)?,
        bias: quantize_tensor(&bias, QuantParams::signed(n_b, bit_width)?)?,
        attrs: conv.attrs,
    })
}
