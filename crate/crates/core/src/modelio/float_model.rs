//! Float models: a JSON manifest plus a binary blob of float32 tensors.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnParams, ConvLayer, Graph, Node, Op};
use crate::nnops::ConvAttrs;
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "shiftquant-model";
pub const MODEL_VERSION: u32 = 1;
pub const BLOB_MAGIC: &[u8; 4] = b"SQBL";
pub const BLOB_VERSION: u32 = 1;
pub const BLOB_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    pub nodes: Vec<NodeEntry>,
}

/// Location of one float32 tensor in the blob payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the payload (after the blob header).
    pub offset: u64,
    /// Byte length.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeEntry {
    pub id: String,
    pub kind: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    /// Input nodes: (C, H, W) of one sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f32>,
    /// Tensor references by role (`weight`, `bias`, `gamma`, `beta`, `mean`, `var`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tensors: BTreeMap<String, String>,
}

pub(crate) fn parse_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn parse_manifest(text: &str) -> Result<ModelManifest> {
    let manifest: ModelManifest = serde_json::from_str(text).map_err(parse_error)?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::Format(format!(
            "manifest format `{}` is not `{MODEL_FORMAT}`",
            manifest.format
        )));
    }
    if manifest.version != MODEL_VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: MODEL_VERSION,
        });
    }
    Ok(manifest)
}

/// Strips and checks the blob header; returns the payload.
pub fn blob_payload(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < BLOB_HEADER_LEN || &bytes[..4] != BLOB_MAGIC {
        return Err(Error::Format("bad blob magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != BLOB_VERSION {
        return Err(Error::Version {
            found: version,
            expected: BLOB_VERSION,
        });
    }
    let declared = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload = &bytes[BLOB_HEADER_LEN..];
    if declared != payload.len() as u64 {
        return Err(Error::Format(format!(
            "blob header declares {declared} payload bytes, file has {}",
            payload.len()
        )));
    }
    Ok(payload)
}

fn read_f32_tensor(entry: &TensorEntry, payload: &[u8]) -> Result<Tensor<f32>> {
    if entry.dtype != "f32" {
        return Err(Error::Format(format!(
            "tensor `{}` has dtype `{}`; float models store f32",
            entry.name, entry.dtype
        )));
    }
    let count: usize = entry.shape.iter().product();
    if entry.length != count as u64 * 4 {
        return Err(Error::ShapeMismatch {
            name: entry.name.clone(),
            expected: entry.shape.clone(),
            found: vec![(entry.length / 4) as usize],
        });
    }
    let end = entry.offset.saturating_add(entry.length);
    if end > payload.len() as u64 {
        return Err(Error::BlobLength {
            name: entry.name.clone(),
            offset: entry.offset,
            end,
            available: payload.len() as u64,
        });
    }
    let bytes = &payload[entry.offset as usize..end as usize];
    Tensor::new(
        entry.shape.clone(),
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

/// Builds and validates a graph from a parsed manifest and blob payload.
pub fn graph_from_manifest(manifest: &ModelManifest, payload: &[u8]) -> Result<Graph> {
    let entries: HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut nodes = Vec::with_capacity(manifest.nodes.len());

    for (index, entry) in manifest.nodes.iter().enumerate() {
        let tensor = |role: &str| -> Result<Tensor<f32>> {
            let name = entry.tensors.get(role).ok_or_else(|| Error::DanglingRef {
                from: entry.id.clone(),
                reference: format!("<{role}>"),
            })?;
            let t = entries
                .get(name.as_str())
                .ok_or_else(|| Error::DanglingRef {
                    from: entry.id.clone(),
                    reference: name.clone(),
                })?;
            read_f32_tensor(t, payload)
        };
        let vector = |role: &str, len: usize| -> Result<Vec<f32>> {
            let t = tensor(role)?;
            if t.len() != len {
                return Err(Error::ShapeMismatch {
                    name: entry.tensors[role].clone(),
                    expected: vec![len],
                    found: t.dims().to_vec(),
                });
            }
            Ok(t.into_data())
        };
        let op = match entry.kind.as_str() {
            "input" => {
                let dims = match entry.shape.as_deref() {
                    Some(&[c, h, w]) => [c, h, w],
                    other => {
                        return Err(Error::ShapeMismatch {
                            name: entry.id.clone(),
                            expected: vec![0, 0, 0],
                            found: other.map(<[usize]>::to_vec).unwrap_or_default(),
                        })
                    }
                };
                Op::Input { dims }
            }
            "conv" => {
                let weight = tensor("weight")?;
                if weight.dims().len() != 4 {
                    return Err(Error::ShapeMismatch {
                        name: entry.tensors["weight"].clone(),
                        expected: vec![0, 0, 0, 0],
                        found: weight.dims().to_vec(),
                    });
                }
                let bias = vector("bias", weight.dims()[0])?;
                let attrs = ConvAttrs::new(entry.stride.unwrap_or(1), entry.padding.unwrap_or(0))?;
                Op::Conv(ConvLayer::new(weight, bias, attrs)?)
            }
            "bn" => {
                let gamma = tensor("gamma")?.into_data();
                let c = gamma.len();
                Op::BatchNorm(BnParams {
                    beta: vector("beta", c)?,
                    mean: vector("mean", c)?,
                    var: vector("var", c)?,
                    gamma,
                    eps: entry.eps.unwrap_or(1e-5),
                })
            }
            "relu" => Op::Relu,
            "add" => Op::Add,
            "output" => Op::Output,
            other => {
                return Err(Error::UnknownNodeKind {
                    node: entry.id.clone(),
                    kind: other.to_string(),
                })
            }
        };
        let inputs = entry
            .inputs
            .iter()
            .map(|name| {
                ids.get(name.as_str())
                    .copied()
                    .ok_or_else(|| Error::DanglingRef {
                        from: entry.id.clone(),
                        reference: name.clone(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        ids.insert(entry.id.as_str(), index);
        nodes.push(Node::new(entry.id.clone(), op, inputs));
    }
    Graph::new(nodes)
}

pub fn load_model(manifest_path: impl AsRef<Path>, blob_path: impl AsRef<Path>) -> Result<Graph> {
    let (mp, bp) = (manifest_path.as_ref(), blob_path.as_ref());
    let text = fs::read_to_string(mp).map_err(|e| Error::io(mp, e))?;
    let blob = fs::read(bp).map_err(|e| Error::io(bp, e))?;
    graph_from_manifest(&parse_manifest(&text)?, blob_payload(&blob)?)
}

/// Serializes a graph to a manifest and a blob (header included).
pub fn encode_model(g: &Graph) -> Result<(ModelManifest, Vec<u8>)> {
    let mut payload: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, data: &[f32]| -> String {
        let offset = payload.len() as u64;
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape,
            dtype: "f32".into(),
            offset,
            length: data.len() as u64 * 4,
        });
        name
    };
    let mut nodes = Vec::with_capacity(g.len());
    for node in g.nodes() {
        let mut entry = NodeEntry {
            id: node.name.clone(),
            kind: node.op.kind().into(),
            inputs: node
                .inputs
                .iter()
                .map(|&i| g.node(i).name.clone())
                .collect(),
            ..NodeEntry::default()
        };
        match &node.op {
            Op::Input { dims } => entry.shape = Some(dims.to_vec()),
            Op::Conv(conv) => {
                entry.stride = Some(conv.attrs.stride);
                entry.padding = Some(conv.attrs.padding);
                let w = add(
                    format!("{}.weight", node.name),
                    conv.weight.dims().to_vec(),
                    conv.weight.data(),
                );
                entry.tensors.insert("weight".into(), w);
                let b = add(
                    format!("{}.bias", node.name),
                    vec![conv.bias.len()],
                    &conv.bias,
                );
                entry.tensors.insert("bias".into(), b);
            }
            Op::BatchNorm(bn) => {
                entry.eps = Some(bn.eps);
                for (role, v) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("mean", &bn.mean),
                    ("var", &bn.var),
                ] {
                    let name = add(format!("{}.{role}", node.name), vec![v.len()], v);
                    entry.tensors.insert(role.into(), name);
                }
            }
            Op::Relu | Op::Add | Op::Output => {}
        }
        nodes.push(entry);
    }
    let mut blob = Vec::with_capacity(BLOB_HEADER_LEN + payload.len());
    blob.extend_from_slice(BLOB_MAGIC);
    blob.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    blob.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    blob.extend_from_slice(&payload);
    Ok((
        ModelManifest {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            tensors,
            nodes,
        },
        blob,
    ))
}

pub fn save_model(
    g: &Graph,
    manifest_path: impl AsRef<Path>,
    blob_path: impl AsRef<Path>,
) -> Result<()> {
    let (mp, bp) = (manifest_path.as_ref(), blob_path.as_ref());
    let (manifest, blob) = encode_model(g)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(parse_error)?;
    fs::write(mp, text + "\n").map_err(|e| Error::io(mp, e))?;
    fs::write(bp, blob).map_err(|e| Error::io(bp, e))
}
