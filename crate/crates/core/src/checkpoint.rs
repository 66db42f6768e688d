//! Model checkpoints: `GLCK` container with the JSON [`ModelSpec`] as header
//! and one float32 array per parameter, in the model's storage order.

use std::path::Path;

use thiserror::Error;

use crate::container::{sha256_hex, Container, ContainerError};
use crate::model::{Model, ModelError, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GLCK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint carries unexpected parameter `{0}`")]
    UnexpectedParameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let header = serde_json::to_vec(model.spec()).expect("spec serializes");
    let mut c = Container::new(MAGIC, header);
    for (name, t) in model.named_params() {
        c.push(name, t.shape().to_vec(), t.data().to_vec());
    }
    c.encode()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model<f32>, CheckpointError> {
    let c = match Container::decode(bytes, MAGIC) {
        // A cut-off final array reads as missing, naming it.
        Err(ContainerError::CorruptLength(name)) => {
            return Err(CheckpointError::MissingParameter(name))
        }
        other => other?,
    };
    let spec: ModelSpec = serde_json::from_slice(&c.header).map_err(ContainerError::from)?;
    let expected = Model::<f32>::expected_params(&spec)?;
    let mut tensors = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let arr = c
            .array(name)
            .ok_or_else(|| CheckpointError::MissingParameter(name.clone()))?;
        if &arr.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                found: arr.shape.clone(),
                expected: shape.clone(),
            });
        }
        let t = Tensor::new(arr.shape.clone(), arr.data.clone()).map_err(ModelError::from)?;
        tensors.push((name.clone(), t));
    }
    if let Some(extra) = c
        .arrays
        .iter()
        .find(|a| !expected.iter().any(|(n, _)| n == &a.name))
    {
        return Err(CheckpointError::UnexpectedParameter(extra.name.clone()));
    }
    Ok(Model::from_parts(spec, tensors)?)
}

/// Writes the checkpoint and returns the SHA-256 of its bytes.
pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<String, CheckpointError> {
    let bytes = encode_checkpoint(model);
    crate::container::write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| crate::container::io_err(path, e))?;
    decode_checkpoint(&bytes)
}
