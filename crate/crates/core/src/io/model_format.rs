// SPDX-License-Identifier: Apache-2.0

//! JSON manifest plus little-endian `f32` weight blob.
//!
//! The schema is documented in `docs/model-format.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_file, Error, Result};
use crate::layers::{
    Conv2d, ConvGeometry, ConvTranspose2d, FullyConnected, InstanceNorm2d, Layer, Pool2d, SigmoidMode,
};
use crate::model::{LayerSpec, ModelSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub name: String,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub weights: BlobInfo,
    /// Blob contents in order.
    pub tensors: Vec<TensorEntry>,
    pub layers: Vec<LayerDesc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub bytes: usize,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub id: String,
    #[serde(flatten)]
    pub params: LayerParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerParams {
    #[serde(rename = "conv2d")]
    Conv2d(ConvParams),
    #[serde(rename = "conv_transpose2d")]
    ConvTranspose2d(ConvParams),
    #[serde(rename = "fully_connected")]
    FullyConnected {
        in_features: usize,
        out_features: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "sigmoid")]
    Sigmoid {
        #[serde(default = "default_sigmoid_mode")]
        mode: String,
    },
    #[serde(rename = "maxpool2d")]
    MaxPool2d { window: usize, stride: usize },
    #[serde(rename = "avgpool2d")]
    AvgPool2d { window: usize, stride: usize },
    #[serde(rename = "instance_norm2d")]
    InstanceNorm2d {
        channels: usize,
        eps: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<String>,
    },
    #[serde(rename = "pixel_shuffle")]
    PixelShuffle { factor: usize },
    #[serde(rename = "flatten")]
    Flatten,
    /// `source` is `"input"` or the id of an earlier layer.
    #[serde(rename = "add")]
    Add { source: String },
    #[serde(rename = "global_avg_pool")]
    GlobalAvgPool,
}

fn default_sigmoid_mode() -> String {
    SigmoidMode::default().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: usize,
    pub weight: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
}

impl ConvParams {
    fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel_h: self.kernel[0],
            kernel_w: self.kernel[1],
            stride: self.stride,
            padding: self.padding,
        }
    }
}

fn load_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Load(msg.into()))
}

/// Tensors handed out by name, each at most once.
struct Weights {
    entries: Vec<(TensorEntry, Vec<f64>, bool)>,
}

impl Weights {
    fn take(&mut self, layer: &str, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let Some((entry, data, used)) = self.entries.iter_mut().find(|(e, _, _)| e.name == name) else {
            return load_err(format!("layer '{layer}' references missing tensor '{name}'"));
        };
        if *used {
            return load_err(format!("tensor '{name}' is referenced more than once"));
        }
        if entry.shape != shape {
            return load_err(format!(
                "tensor '{name}' has shape {:?}, layer '{layer}' needs {shape:?}",
                entry.shape
            ));
        }
        *used = true;
        Ok(std::mem::take(data))
    }

    fn take_opt(&mut self, layer: &str, name: &Option<String>, shape: &[usize]) -> Result<Option<Vec<f64>>> {
        name.as_deref().map(|n| self.take(layer, n, shape)).transpose()
    }
}

fn decode_blob(manifest: &ModelManifest, blob: &[u8]) -> Result<Weights> {
    let mut offset = 0usize;
    let mut entries = Vec::with_capacity(manifest.tensors.len());
    for (i, t) in manifest.tensors.iter().enumerate() {
        if manifest.tensors[..i].iter().any(|o| o.name == t.name) {
            return load_err(format!("tensor '{}' appears more than once", t.name));
        }
        let end = offset + 4 * t.len();
        if end > blob.len() {
            return load_err(format!(
                "weight blob truncated: tensor '{}' needs bytes {offset}..{end}, blob has {}",
                t.name,
                blob.len()
            ));
        }
        let data = blob[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        entries.push((t.clone(), data, false));
        offset = end;
    }
    if offset != blob.len() {
        return load_err(format!(
            "weight blob has {} bytes, the tensor table accounts for {offset}",
            blob.len()
        ));
    }
    if manifest.weights.bytes != blob.len() {
        return load_err(format!(
            "manifest declares {} blob bytes, found {}",
            manifest.weights.bytes,
            blob.len()
        ));
    }
    let crc = crc32fast::hash(blob);
    if crc != manifest.weights.crc32 {
        return load_err(format!(
            "weight blob checksum mismatch: manifest {:08x}, blob {crc:08x}",
            manifest.weights.crc32
        ));
    }
    Ok(Weights { entries })
}

fn build_layer(desc: &LayerDesc, index: usize, ids: &[&str], w: &mut Weights) -> Result<Layer> {
    let id = desc.id.as_str();
    let ctx = |e: Error| match e {
        Error::Load(m) => Error::Load(m),
        other => Error::Load(format!("layer '{id}': {other}")),
    };
    let layer = match &desc.params {
        LayerParams::Conv2d(p) => {
            let shape = [p.out_channels, p.in_channels, p.kernel[0], p.kernel[1]];
            let weight = w.take(id, &p.weight, &shape)?;
            let bias = w.take_opt(id, &p.bias, &[p.out_channels])?;
            Layer::Conv2d(Conv2d::new(p.in_channels, p.out_channels, p.geometry(), weight, bias).map_err(ctx)?)
        }
        LayerParams::ConvTranspose2d(p) => {
            let shape = [p.in_channels, p.out_channels, p.kernel[0], p.kernel[1]];
            let weight = w.take(id, &p.weight, &shape)?;
            let bias = w.take_opt(id, &p.bias, &[p.out_channels])?;
            Layer::ConvTranspose2d(
                ConvTranspose2d::new(p.in_channels, p.out_channels, p.geometry(), weight, bias).map_err(ctx)?,
            )
        }
        LayerParams::FullyConnected {
            in_features,
            out_features,
            weight,
            bias,
        } => {
            let wt = w.take(id, weight, &[*out_features, *in_features])?;
            let b = w.take_opt(id, bias, &[*out_features])?;
            Layer::FullyConnected(FullyConnected::new(*in_features, *out_features, wt, b).map_err(ctx)?)
        }
        LayerParams::Relu => Layer::Relu,
        LayerParams::Sigmoid { mode } => Layer::Sigmoid(mode.parse().map_err(ctx)?),
        LayerParams::MaxPool2d { window, stride } => Layer::MaxPool2d(Pool2d::new(*window, *stride).map_err(ctx)?),
        LayerParams::AvgPool2d { window, stride } => Layer::AvgPool2d(Pool2d::new(*window, *stride).map_err(ctx)?),
        LayerParams::InstanceNorm2d {
            channels,
            eps,
            gamma,
            beta,
        } => {
            let g = w.take_opt(id, gamma, &[*channels])?;
            let b = w.take_opt(id, beta, &[*channels])?;
            Layer::InstanceNorm2d(InstanceNorm2d::new(*channels, *eps, g, b).map_err(ctx)?)
        }
        LayerParams::PixelShuffle { factor } => Layer::PixelShuffle(*factor),
        LayerParams::Flatten => Layer::Flatten,
        LayerParams::Add { source } => {
            let source = if source == "input" {
                0
            } else {
                match ids[..index].iter().position(|s| s == source) {
                    Some(j) => j + 1,
                    None => return load_err(format!("layer '{id}' adds unknown or later layer '{source}'")),
                }
            };
            Layer::Add { source }
        }
        LayerParams::GlobalAvgPool => Layer::GlobalAvgPool,
    };
    Ok(layer)
}

/// Validated model from an already-parsed manifest and its blob.
pub fn model_from_parts(manifest: &ModelManifest, blob: &[u8]) -> Result<ModelSpec> {
    if manifest.format_version != FORMAT_VERSION {
        return load_err(format!(
            "unsupported format version {} (supported: {FORMAT_VERSION})",
            manifest.format_version
        ));
    }
    let mut weights = decode_blob(manifest, blob)?;
    let ids: Vec<&str> = manifest.layers.iter().map(|l| l.id.as_str()).collect();
    let layers = manifest
        .layers
        .iter()
        .enumerate()
        .map(|(i, d)| Ok(LayerSpec::new(d.id.clone(), build_layer(d, i, &ids, &mut weights)?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some((e, _, _)) = weights.entries.iter().find(|(_, _, used)| !used) {
        return load_err(format!("tensor '{}' is not referenced by any layer", e.name));
    }
    let model = ModelSpec::new(manifest.name.clone(), &manifest.input_shape, layers)
        .map_err(|e| Error::Load(format!("model '{}': {e}", manifest.name)))?;
    if model.output_shape() != manifest.output_shape.as_slice() {
        return load_err(format!(
            "manifest declares output {:?}, layers produce {:?}",
            manifest.output_shape,
            model.output_shape()
        ));
    }
    Ok(model)
}

pub fn parse_manifest(text: &str) -> Result<ModelManifest> {
    serde_json::from_str(text).map_err(|e| Error::Load(format!("manifest: {e}")))
}

pub fn load_model(manifest_path: &Path, blob_path: &Path) -> Result<ModelSpec> {
    let text = read_file(manifest_path)?;
    let text = std::str::from_utf8(&text).map_err(|e| Error::Load(format!("manifest: {e}")))?;
    let manifest = parse_manifest(text)?;
    let blob = read_file(blob_path)?;
    model_from_parts(&manifest, &blob)
}

struct BlobWriter {
    tensors: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, data: &[f64]) -> String {
        for &v in data {
            self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.tensors.push(TensorEntry {
            name: name.clone(),
            shape,
        });
        name
    }

    fn push_opt(&mut self, name: String, shape: Vec<usize>, data: &Option<Vec<f64>>) -> Option<String> {
        data.as_ref().map(|d| self.push(name, shape, d))
    }
}

fn conv_params(
    id: &str,
    [in_channels, out_channels]: [usize; 2],
    g: &ConvGeometry,
    weight_shape: Vec<usize>,
    weight: &[f64],
    bias: &Option<Vec<f64>>,
    blob: &mut BlobWriter,
) -> ConvParams {
    ConvParams {
        in_channels,
        out_channels,
        kernel: [g.kernel_h, g.kernel_w],
        stride: g.stride,
        padding: g.padding,
        weight: blob.push(format!("{id}.weight"), weight_shape, weight),
        bias: blob.push_opt(format!("{id}.bias"), vec![out_channels], bias),
    }
}

/// Manifest and blob for `model`; weights are rounded to `f32`.
pub fn model_to_parts(model: &ModelSpec) -> (ModelManifest, Vec<u8>) {
    let mut blob = BlobWriter {
        tensors: Vec::new(),
        bytes: Vec::new(),
    };
    let mut layers = Vec::with_capacity(model.len());
    for spec in model.layers() {
        let id = spec.id.as_str();
        let params = match &spec.layer {
            Layer::Conv2d(c) => LayerParams::Conv2d(conv_params(
                id,
                [c.in_channels, c.out_channels],
                &c.geometry,
                vec![c.out_channels, c.in_channels, c.geometry.kernel_h, c.geometry.kernel_w],
                &c.weight,
                &c.bias,
                &mut blob,
            )),
            Layer::ConvTranspose2d(c) => LayerParams::ConvTranspose2d(conv_params(
                id,
                [c.in_channels, c.out_channels],
                &c.geometry,
                vec![c.in_channels, c.out_channels, c.geometry.kernel_h, c.geometry.kernel_w],
                &c.weight,
                &c.bias,
                &mut blob,
            )),
            Layer::FullyConnected(f) => LayerParams::FullyConnected {
                in_features: f.in_features,
                out_features: f.out_features,
                weight: blob.push(format!("{id}.weight"), vec![f.out_features, f.in_features], &f.weight),
                bias: blob.push_opt(format!("{id}.bias"), vec![f.out_features], &f.bias),
            },
            Layer::Relu => LayerParams::Relu,
            Layer::Sigmoid(mode) => LayerParams::Sigmoid { mode: mode.to_string() },
            Layer::MaxPool2d(p) => LayerParams::MaxPool2d {
                window: p.window,
                stride: p.stride,
            },
            Layer::AvgPool2d(p) => LayerParams::AvgPool2d {
                window: p.window,
                stride: p.stride,
            },
            Layer::InstanceNorm2d(n) => LayerParams::InstanceNorm2d {
                channels: n.channels,
                eps: n.eps,
                gamma: blob.push_opt(format!("{id}.gamma"), vec![n.channels], &n.gamma),
                beta: blob.push_opt(format!("{id}.beta"), vec![n.channels], &n.beta),
            },
            Layer::PixelShuffle(r) => LayerParams::PixelShuffle { factor: *r },
            Layer::Flatten => LayerParams::Flatten,
            Layer::Add { source } => LayerParams::Add {
                source: match source {
                    0 => "input".to_string(),
                    s => model.layers()[s - 1].id.clone(),
                },
            },
            Layer::GlobalAvgPool => LayerParams::GlobalAvgPool,
        };
        layers.push(LayerDesc {
            id: spec.id.clone(),
            params,
        });
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        name: model.name().to_string(),
        input_shape: model.input_shape().to_vec(),
        output_shape: model.output_shape().to_vec(),
        weights: BlobInfo {
            bytes: blob.bytes.len(),
            crc32: crc32fast::hash(&blob.bytes),
        },
        tensors: blob.tensors,
        layers,
    };
    (manifest, blob.bytes)
}

pub fn manifest_to_string(manifest: &ModelManifest) -> String {
    let mut s = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    s.push('\n');
    s
}

pub fn save_model(model: &ModelSpec, manifest_path: &Path, blob_path: &Path) -> Result<()> {
    let (manifest, blob) = model_to_parts(model);
    fs::write(manifest_path, manifest_to_string(&manifest))?;
    fs::write(blob_path, blob)?;
    Ok(())
}

/// `model.json` → `model.bin`.
pub fn default_blob_path(manifest_path: &Path) -> std::path::PathBuf {
    manifest_path.with_extension("bin")
}
