//! On-disk format for trained networks.
//!
//! A file is the magic line, one line of JSON describing the network, then
//! every layer's weights (row-major, `in x out`) followed by its biases, as
//! little-endian `f32`.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::interpreter::Interpreter;
use super::mlp::{Layer, MlpModel, Normalization};
use super::refiner::{FixedProjection, RefinerModel};
use crate::error::{Error, Result};
use crate::heatmap::GridGeometry;
use crate::synth::hex_digest;

pub const MODEL_FORMAT: &str = "skelmlp-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    widths: Vec<usize>,
    input_norm: Normalization,
    target_norm: Normalization,
    geometry: GridGeometry,
    /// Structural weights for an interpreter, channels for a refiner.
    n_bases: usize,
    n_channels: usize,
    refined_inputs: bool,
    projection: Option<(u64, usize, usize)>,
    provenance: Value,
    sha256: String,
}

fn encode_body(mlp: &MlpModel<f32>) -> Vec<u8> {
    let mut body = Vec::with_capacity(mlp.n_params() * 4);
    for layer in &mlp.layers {
        for v in layer.weight.iter().chain(layer.bias.iter()) {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    body
}

fn write_model(path: &Path, mut header: Header, mlp: &MlpModel<f32>) -> Result<()> {
    let body = encode_body(mlp);
    header.sha256 = hex_digest(&body);
    let mut bytes = format!("{MODEL_FORMAT}\n").into_bytes();
    bytes.extend(serde_json::to_vec(&header).map_err(|e| Error::Parse(e.to_string()))?);
    bytes.push(b'\n');
    bytes.extend(body);
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_model(path: &Path) -> Result<(Header, MlpModel<f32>)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    let magic = lines.next().unwrap_or_default();
    if magic != MODEL_FORMAT.as_bytes() {
        return Err(Error::Parse(format!("not a {MODEL_FORMAT} file")));
    }
    let header: Header = serde_json::from_slice(lines.next().unwrap_or_default())
        .map_err(|e| Error::Parse(format!("model header: {e}")))?;
    let body = lines.next().unwrap_or_default();
    if hex_digest(body) != header.sha256 {
        return Err(Error::Integrity("model body digest mismatch".into()));
    }
    let expected: usize = header.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if header.widths.len() < 2 || body.len() != expected * 4 {
        return Err(Error::Integrity("model body length does not match its widths".into()));
    }
    let mut values = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let layers = header
        .widths
        .windows(2)
        .map(|w| {
            let weight = Array2::from_shape_simple_fn((w[0], w[1]), || values.next().unwrap());
            let bias = Array1::from_shape_simple_fn(w[1], || values.next().unwrap());
            Layer { weight, bias }
        })
        .collect();
    let mlp = MlpModel::from_layers(layers, header.input_norm.clone(), header.target_norm.clone())?;
    Ok((header, mlp))
}

pub fn save_interpreter(path: impl AsRef<Path>, interp: &Interpreter<f32>, provenance: Value) -> Result<()> {
    let header = Header {
        kind: "interpreter".into(),
        widths: interp.mlp.widths(),
        input_norm: interp.mlp.input_norm.clone(),
        target_norm: interp.mlp.target_norm.clone(),
        geometry: interp.geometry,
        n_bases: interp.n_bases,
        n_channels: 0,
        refined_inputs: interp.refined_inputs,
        projection: None,
        provenance,
        sha256: String::new(),
    };
    write_model(path.as_ref(), header, &interp.mlp)
}

/// Loads an interpreter and the provenance recorded with it.
pub fn load_interpreter(path: impl AsRef<Path>) -> Result<(Interpreter<f32>, Value)> {
    let (header, mlp) = read_model(path.as_ref())?;
    if header.kind != "interpreter" {
        return Err(Error::Parse(format!("expected an interpreter, found {}", header.kind)));
    }
    let interp = Interpreter::new(mlp, header.geometry, header.n_bases, header.refined_inputs)?;
    Ok((interp, header.provenance))
}

pub fn save_refiner(path: impl AsRef<Path>, model: &RefinerModel, provenance: Value) -> Result<()> {
    let header = Header {
        kind: "refiner".into(),
        widths: model.mlp.widths(),
        input_norm: model.mlp.input_norm.clone(),
        target_norm: model.mlp.target_norm.clone(),
        geometry: model.geometry,
        n_bases: 0,
        n_channels: model.n_channels,
        refined_inputs: false,
        projection: model.projection.as_ref().map(|p| (p.seed, p.in_dim, p.out_dim)),
        provenance,
        sha256: String::new(),
    };
    write_model(path.as_ref(), header, &model.mlp)
}

pub fn load_refiner(path: impl AsRef<Path>) -> Result<(RefinerModel, Value)> {
    let (header, mlp) = read_model(path.as_ref())?;
    if header.kind != "refiner" {
        return Err(Error::Parse(format!("expected a refiner, found {}", header.kind)));
    }
    let projection = header.projection.map(|(seed, i, o)| FixedProjection::new(seed, i, o));
    let model = RefinerModel::new(header.geometry, header.n_channels, projection, mlp)?;
    Ok((model, header.provenance))
}
