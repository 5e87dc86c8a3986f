//! On-disk formats: float models, quantized models and raw tensors.

mod float_model;
mod quantized;
mod tensor_file;

pub use float_model::{
    blob_payload, encode_model, graph_from_manifest, load_model, parse_manifest, save_model,
    ModelManifest, NodeEntry, TensorEntry, BLOB_MAGIC, MODEL_FORMAT, MODEL_VERSION,
};
pub use quantized::{
    decode_quantized, encode_quantized, load_quantized, save_quantized, QMODEL_MAGIC,
    QMODEL_VERSION,
};
pub use tensor_file::{decode_tensor, encode_tensor, read_tensor, write_tensor, TENSOR_MAGIC};
