//! Quantized model files.
//!
//! ```text
//! offset  size  field
//!      0     8  magic "SQQMODEL"
//!      8     4  format version, u32 LE
//!     12     4  manifest length M, u32 LE
//!     16     M  JSON manifest (compact, UTF-8)
//!   16+M     …  int8 payload: weights and biases, referenced by offset
//! ```
//!
//! Encoding is deterministic, so save, load, save reproduces the file byte
//! for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::float_model::parse_error;
use crate::engine::{QuantizedModel, QuantizedModule, Source};
use crate::error::{Error, Result};
use crate::fixedpoint::{QuantParams, QuantizedTensor};
use crate::nnops::{ConvAttrs, FusionCase, ModuleShifts, QuantizedConv};
use crate::tensor::Tensor;

pub const QMODEL_MAGIC: &[u8; 8] = b"SQQMODEL";
pub const QMODEL_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    bit_width: u32,
    input_params: QuantParams,
    input_dims: [usize; 3],
    output: Source,
    modules: Vec<ModuleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModuleEntry {
    name: String,
    output_node: String,
    case: FusionCase,
    input: Source,
    shortcut: Option<Source>,
    attrs: ConvAttrs,
    n_x: i32,
    n_o: i32,
    n_shortcut: Option<i32>,
    shifts: ModuleShifts,
    weight: IntEntry,
    bias: IntEntry,
}

#[derive(Debug, Serialize, Deserialize)]
struct IntEntry {
    shape: Vec<usize>,
    params: QuantParams,
    offset: u64,
    length: u64,
}

fn push_ints(payload: &mut Vec<u8>, q: &QuantizedTensor) -> IntEntry {
    let offset = payload.len() as u64;
    // Range checked at construction; bit width ≤ 8 keeps every value in i8.
    payload.extend(q.ints().data().iter().map(|&v| v as i8 as u8));
    IntEntry {
        shape: q.dims().to_vec(),
        params: q.params(),
        offset,
        length: q.ints().len() as u64,
    }
}

fn read_ints(name: &str, e: &IntEntry, payload: &[u8]) -> Result<QuantizedTensor> {
    let count: usize = e.shape.iter().product();
    if e.length != count as u64 {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: e.shape.clone(),
            found: vec![e.length as usize],
        });
    }
    let end = e.offset.saturating_add(e.length);
    if end > payload.len() as u64 {
        return Err(Error::BlobLength {
            name: name.to_string(),
            offset: e.offset,
            end,
            available: payload.len() as u64,
        });
    }
    let ints: Vec<i32> = payload[e.offset as usize..end as usize]
        .iter()
        .map(|&b| b as i8 as i32)
        .collect();
    e.params.validate()?;
    let (lo, hi) = e.params.range();
    if let Some((index, &value)) = ints
        .iter()
        .enumerate()
        .find(|(_, &v)| (v as i64) < lo || (v as i64) > hi)
    {
        return Err(Error::Range {
            name: name.to_string(),
            index,
            value: value as i64,
            lo,
            hi,
        });
    }
    QuantizedTensor::new(Tensor::new(e.shape.clone(), ints)?, e.params)
}

pub fn encode_quantized(model: &QuantizedModel) -> Result<Vec<u8>> {
    if model.bit_width > 8 {
        return Err(Error::InvalidParams(format!(
            "quantized model files store int8; bit width {} is too wide",
            model.bit_width
        )));
    }
    model.validate()?;
    let mut payload = Vec::new();
    let modules = model
        .modules
        .iter()
        .map(|m| ModuleEntry {
            name: m.name.clone(),
            output_node: m.output_node.clone(),
            case: m.case,
            input: m.input,
            shortcut: m.shortcut,
            attrs: m.conv.attrs,
            n_x: m.n_x,
            n_o: m.n_o,
            n_shortcut: m.n_shortcut,
            shifts: m.shifts,
            weight: push_ints(&mut payload, &m.conv.weight),
            bias: push_ints(&mut payload, &m.conv.bias),
        })
        .collect();
    let manifest = Manifest {
        bit_width: model.bit_width,
        input_params: model.input_params,
        input_dims: model.input_dims,
        output: model.output,
        modules,
    };
    let json = serde_json::to_vec(&manifest).map_err(parse_error)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len());
    out.extend_from_slice(QMODEL_MAGIC);
    out.extend_from_slice(&QMODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_quantized(bytes: &[u8]) -> Result<QuantizedModel> {
    if bytes.len() < PREFIX_LEN || &bytes[..8] != QMODEL_MAGIC {
        return Err(Error::Format("bad quantized model magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != QMODEL_VERSION {
        return Err(Error::Version {
            found: version,
            expected: QMODEL_VERSION,
        });
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let Some(json) = bytes.get(PREFIX_LEN..PREFIX_LEN + len) else {
        return Err(Error::Format(format!(
            "manifest length {len} runs past the end of the file"
        )));
    };
    let payload = &bytes[PREFIX_LEN + len..];
    let manifest: Manifest = serde_json::from_slice(json).map_err(parse_error)?;
    if manifest.bit_width > 8 {
        return Err(Error::InvalidParams(format!(
            "bit width {} cannot be stored as int8",
            manifest.bit_width
        )));
    }
    let modules = manifest
        .modules
        .into_iter()
        .map(|e| {
            Ok(QuantizedModule {
                conv: QuantizedConv {
                    weight: read_ints(&format!("{}.weight", e.name), &e.weight, payload)?,
                    bias: read_ints(&format!("{}.bias", e.name), &e.bias, payload)?,
                    attrs: e.attrs,
                },
                name: e.name,
                output_node: e.output_node,
                case: e.case,
                input: e.input,
                shortcut: e.shortcut,
                n_x: e.n_x,
                n_o: e.n_o,
                n_shortcut: e.n_shortcut,
                shifts: e.shifts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = QuantizedModel {
        bit_width: manifest.bit_width,
        input_params: manifest.input_params,
        input_dims: manifest.input_dims,
        modules,
        output: manifest.output,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_quantized(model: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_quantized(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    let path = path.as_ref();
    decode_quantized(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
