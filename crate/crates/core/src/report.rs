//! Per-module error, shift histogram and quant-op census of a quantized model.
//!
//! CSV columns are `section,index,name,case,value`. Sections:
//!
//! * `mse`: one row per module in execution order; `value` is the mean squared
//!   error between the integer engine's dequantized output and the float
//!   graph's activation at the same node.
//! * `shift`: one row per distinct stored shift amount; `name` is the amount
//!   and `value` its count.
//! * `quant_ops`: rows `fused` and `naive`.
//!
//! Floats are printed with 9 significant digits so reports are byte-stable.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::engine::QuantizedModel;
use crate::error::{Error, Result};
use crate::graph::{count_quant_ops, count_quant_ops_naive, fold_bn, fuse, Graph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleStats {
    pub index: usize,
    pub name: String,
    pub case: String,
    pub n_x: i32,
    pub n_w: i32,
    pub n_b: i32,
    pub n_o: i32,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub bit_width: u32,
    pub modules: Vec<ModuleStats>,
    /// Stored shift amount → occurrences.
    pub shift_histogram: BTreeMap<i32, usize>,
    pub quant_ops_fused: usize,
    pub quant_ops_naive: usize,
}

fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    sum / a.len() as f64
}

/// Compares `model` against the float graph it was quantized from, on `x`.
pub fn build_report(
    model: &QuantizedModel,
    float_graph: &Graph,
    x: &Tensor<f32>,
) -> Result<Report> {
    let folded = fold_bn(float_graph)?;
    let fused = fuse(&folded)?;
    let acts = folded.run_float(&x.to_f64())?;
    let outs = model.run_int_all(x)?;
    let mut modules = Vec::with_capacity(model.modules.len());
    for (index, (m, q)) in model.modules.iter().zip(&outs).enumerate() {
        let node = folded.find(&m.output_node).ok_or_else(|| {
            Error::InvalidGraph(format!(
                "float model has no node `{}` for module `{}`",
                m.output_node, m.name
            ))
        })?;
        let reference = &acts[node];
        if reference.dims() != q.dims() {
            return Err(Error::dims(&m.output_node, reference.dims(), q.dims()));
        }
        modules.push(ModuleStats {
            index,
            name: m.name.clone(),
            case: m.case.label().to_string(),
            n_x: m.n_x,
            n_w: m.n_w(),
            n_b: m.n_b(),
            n_o: m.n_o,
            mse: mse(reference, &q.to_real()),
        });
    }
    let mut shift_histogram = BTreeMap::new();
    for s in model.all_shift_amounts() {
        *shift_histogram.entry(s).or_insert(0) += 1;
    }
    Ok(Report {
        bit_width: model.bit_width,
        modules,
        shift_histogram,
        quant_ops_fused: count_quant_ops(&fused),
        quant_ops_naive: count_quant_ops_naive(&folded),
    })
}

/// 9 significant digits in scientific notation.
pub fn format_float(v: f64) -> String {
    format!("{v:.8e}")
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,index,name,case,value\n");
        for m in &self.modules {
            let _ = writeln!(
                s,
                "mse,{},{},{},{}",
                m.index,
                m.name,
                m.case,
                format_float(m.mse)
            );
        }
        for (i, (shift, count)) in self.shift_histogram.iter().enumerate() {
            let _ = writeln!(s, "shift,{i},{shift},,{count}");
        }
        let _ = writeln!(s, "quant_ops,0,fused,,{}", self.quant_ops_fused);
        let _ = writeln!(s, "quant_ops,1,naive,,{}", self.quant_ops_naive);
        s
    }

    /// JSON with floats as fixed-precision strings.
    pub fn to_json(&self) -> String {
        let modules: Vec<_> = self
            .modules
            .iter()
            .map(|m| {
                serde_json::json!({
                    "index": m.index,
                    "name": m.name,
                    "case": m.case,
                    "n_x": m.n_x,
                    "n_w": m.n_w,
                    "n_b": m.n_b,
                    "n_o": m.n_o,
                    "mse": format_float(m.mse),
                })
            })
            .collect();
        let histogram: Vec<_> = self
            .shift_histogram
            .iter()
            .map(|(s, c)| serde_json::json!({ "shift": s, "count": c }))
            .collect();
        let v = serde_json::json!({
            "bit_width": self.bit_width,
            "modules": modules,
            "shift_histogram": histogram,
            "quant_ops": { "fused": self.quant_ops_fused, "naive": self.quant_ops_naive },
        });
        serde_json::to_string_pretty(&v).expect("plain json values") + "\n"
    }
}
