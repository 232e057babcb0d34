//! JSON manifest → [`ModelGraph`] conversion.
//!
//! The manifest is the interchange point with training code. Integers are
//! read at 64-bit width and narrowed with an explicit range check, weight
//! blobs of any supported element type become `f32`, and batch-norm layers
//! are folded into the convolution that feeds them.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::{validate, HeadConfig, HeadScale, LayerDesc, LayerParams, ModelGraph, ValidationError};
use crate::ops::{Activation, ConvParams};

/// Layer kinds a manifest may use. `batch_norm` only exists until conversion.
pub const SUPPORTED_LAYER_KINDS: [&str; 7] = [
    "conv",
    "batch_norm",
    "activate",
    "max_pool",
    "upsample",
    "concat",
    "add",
];

const DEFAULT_BN_EPS: f64 = 1e-5;
const DEFAULT_LEAKY_SLOPE: f64 = 0.1;
const INPUT_NAME: &str = "input";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConvertError {
    #[error("manifest is not valid JSON for the expected schema: {0}")]
    Json(String),
    #[error("field `{field}`: value {value} does not fit in a 32-bit integer")]
    Narrowing { field: String, value: String },
    #[error("field `{field}`: {message}")]
    InvalidValue { field: String, message: String },
    #[error("field `{field}` is required")]
    MissingField { field: String },
    #[error("unsupported operator `{kind}` in layer `{layer}` (supported: {})", SUPPORTED_LAYER_KINDS.join(", "))]
    UnsupportedOperator { layer: String, kind: String },
    #[error("field `{field}` references unknown layer `{name}`")]
    UnknownLayer { field: String, name: String },
    #[error("blob `{name}` is declared in the manifest but no data was supplied")]
    MissingBlob { name: String },
    #[error("blob `{name}`: {message}")]
    Blob { name: String, message: String },
    #[error("batch_norm layer `{layer}`: {message}")]
    BatchNorm { layer: String, message: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I32,
    I64,
}

impl DType {
    pub fn size(&self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

/// Declared element type and shape of a named blob. `file` is where command
/// line tools load the bytes from, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    pub dtype: DType,
    pub shape: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub params: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHead {
    pub outputs: Vec<String>,
    pub strides: Vec<Value>,
    pub anchors: Vec<Vec<(f64, f64)>>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Input tensor as `{"channels", "height", "width"}`; referenced by layers as `"input"`.
    pub input: Map<String, Value>,
    pub layers: Vec<ManifestLayer>,
    pub head: ManifestHead,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub blobs: BTreeMap<String, BlobSpec>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self, ConvertError> {
        serde_json::from_str(text).map_err(|e| ConvertError::Json(e.to_string()))
    }

    /// File name each blob is read from: the declared `file`, else `<name>.bin`.
    pub fn blob_files(&self) -> Vec<(String, String)> {
        self.blobs
            .iter()
            .map(|(name, spec)| {
                (
                    name.clone(),
                    spec.file.clone().unwrap_or_else(|| format!("{name}.bin")),
                )
            })
            .collect()
    }
}

/// Reads an integer that must be representable as a non-negative `i32`.
fn narrow(field: &str, value: &Value) -> Result<usize, ConvertError> {
    let Value::Number(n) = value else {
        return Err(ConvertError::InvalidValue {
            field: field.into(),
            message: format!("expected an integer, found {value}"),
        });
    };
    let wide: i128 = if let Some(v) = n.as_i64() {
        v.into()
    } else if let Some(v) = n.as_u64() {
        v.into()
    } else {
        return match n.as_f64() {
            Some(f) if f.fract() != 0.0 => Err(ConvertError::InvalidValue {
                field: field.into(),
                message: format!("expected an integer, found {n}"),
            }),
            _ => Err(ConvertError::Narrowing {
                field: field.into(),
                value: n.to_string(),
            }),
        };
    };
    let narrowed = i32::try_from(wide).map_err(|_| ConvertError::Narrowing {
        field: field.into(),
        value: wide.to_string(),
    })?;
    usize::try_from(narrowed).map_err(|_| ConvertError::InvalidValue {
        field: field.into(),
        message: format!("must be non-negative, found {narrowed}"),
    })
}

fn get<'a>(params: &'a Map<String, Value>, field: &str, key: &str) -> Result<&'a Value, ConvertError> {
    params.get(key).ok_or_else(|| ConvertError::MissingField {
        field: format!("{field}.{key}"),
    })
}

fn int(params: &Map<String, Value>, field: &str, key: &str, default: Option<usize>) -> Result<usize, ConvertError> {
    match (params.get(key), default) {
        (Some(v), _) => narrow(&format!("{field}.{key}"), v),
        (None, Some(d)) => Ok(d),
        (None, None) => Err(ConvertError::MissingField {
            field: format!("{field}.{key}"),
        }),
    }
}

/// An integer or an `[a, b]` pair.
fn pair(params: &Map<String, Value>, field: &str, key: &str, default: Option<usize>) -> Result<(usize, usize), ConvertError> {
    let name = format!("{field}.{key}");
    match params.get(key) {
        Some(Value::Array(items)) if items.len() == 2 => Ok((
            narrow(&format!("{name}[0]"), &items[0])?,
            narrow(&format!("{name}[1]"), &items[1])?,
        )),
        Some(Value::Array(_)) => Err(ConvertError::InvalidValue {
            field: name,
            message: "expected an integer or a two-element array".into(),
        }),
        Some(v) => {
            let x = narrow(&name, v)?;
            Ok((x, x))
        }
        None => default
            .map(|d| (d, d))
            .ok_or(ConvertError::MissingField { field: name }),
    }
}

fn float(params: &Map<String, Value>, field: &str, key: &str, default: f64) -> Result<f64, ConvertError> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v.as_f64().filter(|f| f.is_finite()).ok_or_else(|| ConvertError::InvalidValue {
            field: format!("{field}.{key}"),
            message: format!("expected a finite number, found {v}"),
        }),
    }
}

fn string<'a>(params: &'a Map<String, Value>, field: &str, key: &str) -> Result<&'a str, ConvertError> {
    let v = get(params, field, key)?;
    v.as_str().ok_or_else(|| ConvertError::InvalidValue {
        field: format!("{field}.{key}"),
        message: format!("expected a string, found {v}"),
    })
}

/// Decodes a named blob to `f32`, checking its declared shape and byte length.
fn load_blob(
    manifest: &Manifest,
    blobs: &HashMap<String, Vec<u8>>,
    name: &str,
    field: &str,
) -> Result<(Vec<usize>, Vec<f32>), ConvertError> {
    let spec = manifest.blobs.get(name).ok_or_else(|| ConvertError::InvalidValue {
        field: field.into(),
        message: format!("blob `{name}` is not declared in `blobs`"),
    })?;
    let shape = spec
        .shape
        .iter()
        .enumerate()
        .map(|(i, v)| narrow(&format!("blobs.{name}.shape[{i}]"), v))
        .collect::<Result<Vec<_>, _>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| ConvertError::Blob {
            name: name.into(),
            message: "declared shape overflows".into(),
        })?;
    let bytes = blobs.get(name).ok_or_else(|| ConvertError::MissingBlob { name: name.into() })?;
    let expected = count.checked_mul(spec.dtype.size());
    if expected != Some(bytes.len()) {
        return Err(ConvertError::Blob {
            name: name.into(),
            message: format!(
                "{} bytes supplied, shape {shape:?} of {:?} needs {}",
                bytes.len(),
                spec.dtype,
                expected.map_or("an overflowing count".to_string(), |e| e.to_string())
            ),
        });
    }
    let chunks = bytes.chunks_exact(spec.dtype.size());
    let values: Result<Vec<f32>, ConvertError> = match spec.dtype {
        DType::F32 => Ok(chunks.map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        DType::F64 => chunks
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .enumerate()
            .map(|(i, v)| {
                let narrowed = v as f32;
                if v.is_finite() && narrowed.is_finite() {
                    Ok(narrowed)
                } else {
                    Err(ConvertError::InvalidValue {
                        field: format!("blobs.{name}[{i}]"),
                        message: format!("{v} is not representable as a finite 32-bit float"),
                    })
                }
            })
            .collect(),
        DType::I32 => Ok(chunks
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect()),
        DType::I64 => chunks
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .enumerate()
            .map(|(i, v)| {
                i32::try_from(v).map(|x| x as f32).map_err(|_| ConvertError::Narrowing {
                    field: format!("blobs.{name}[{i}]"),
                    value: v.to_string(),
                })
            })
            .collect(),
    };
    let values = values?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(ConvertError::InvalidValue {
            field: format!("blobs.{name}[{i}]"),
            message: "non-finite weight".into(),
        });
    }
    Ok((shape, values))
}

/// Folds `y = gamma * (conv(x) - mean) / sqrt(var + eps) + beta` into the conv.
///
/// `weights` is laid out output-channel-major; returns the new weights and bias.
#[allow(clippy::too_many_arguments)]
pub fn fold_batch_norm(
    weights: &[f32],
    bias: Option<&[f32]>,
    out_channels: usize,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f64,
) -> (Vec<f32>, Vec<f32>) {
    let per_channel = weights.len() / out_channels;
    let mut folded_w = Vec::with_capacity(weights.len());
    let mut folded_b = Vec::with_capacity(out_channels);
    for oc in 0..out_channels {
        let scale = f64::from(gamma[oc]) / (f64::from(var[oc]) + eps).sqrt();
        folded_w.extend(
            weights[oc * per_channel..(oc + 1) * per_channel]
                .iter()
                .map(|&w| (f64::from(w) * scale) as f32),
        );
        let b = bias.map_or(0.0, |b| f64::from(b[oc]));
        folded_b.push(((b - f64::from(mean[oc])) * scale + f64::from(beta[oc])) as f32);
    }
    (folded_w, folded_b)
}

/// Conversion-time layer: a graph layer plus the blob data it owns.
struct Pending {
    name: String,
    params: LayerParams,
    inputs: Vec<String>,
    weights: Option<Vec<f32>>,
}

/// Converts a manifest plus its named weight blobs into a validated graph.
pub fn convert_manifest(
    manifest_json: &str,
    blobs: &HashMap<String, Vec<u8>>,
) -> Result<ModelGraph, ConvertError> {
    let manifest = Manifest::from_json(manifest_json)?;
    convert(&manifest, blobs)
}

fn convert(manifest: &Manifest, blobs: &HashMap<String, Vec<u8>>) -> Result<ModelGraph, ConvertError> {
    let input = LayerParams::Input {
        channels: int(&manifest.input, "input", "channels", None)?,
        height: int(&manifest.input, "input", "height", None)?,
        width: int(&manifest.input, "input", "width", None)?,
    };
    let mut pending: Vec<Pending> = vec![Pending {
        name: INPUT_NAME.into(),
        params: input,
        inputs: vec![],
        weights: None,
    }];
    // Batch-norm layer name -> the conv it was folded into.
    let mut aliases: HashMap<String, String> = HashMap::new();
    let mut folded: HashSet<String> = HashSet::new();

    for (i, layer) in manifest.layers.iter().enumerate() {
        let field = format!("layers[{i}]");
        let p = &layer.params;
        let inputs: Vec<String> = layer
            .inputs
            .iter()
            .map(|name| aliases.get(name).cloned().unwrap_or_else(|| name.clone()))
            .collect();
        for (k, name) in inputs.iter().enumerate() {
            if folded.contains(name) && !aliases.contains_key(&layer.inputs[k]) {
                return Err(ConvertError::BatchNorm {
                    layer: name.clone(),
                    message: format!("{field} reads the conv output from before its batch norm"),
                });
            }
            if !pending.iter().any(|l| &l.name == name) {
                return Err(ConvertError::UnknownLayer {
                    field: format!("{field}.inputs[{k}]"),
                    name: layer.inputs[k].clone(),
                });
            }
        }
        if pending.iter().any(|l| l.name == layer.name) || aliases.contains_key(&layer.name) {
            return Err(ConvertError::InvalidValue {
                field: format!("{field}.name"),
                message: format!("duplicate layer name `{}`", layer.name),
            });
        }
        let (params, weights) = match layer.kind.as_str() {
            "conv" => {
                let conv = ConvParams {
                    out_channels: int(p, &field, "out_channels", None)?,
                    kernel: pair(p, &field, "kernel", None)?,
                    stride: pair(p, &field, "stride", Some(1))?,
                    padding: pair(p, &field, "padding", Some(0))?,
                    groups: int(p, &field, "groups", Some(1))?,
                    has_bias: p.contains_key("bias"),
                };
                let (wshape, mut w) = load_blob(manifest, blobs, string(p, &field, "weights")?, &format!("{field}.weights"))?;
                if wshape.len() != 4
                    || wshape[0] != conv.out_channels
                    || (wshape[2], wshape[3]) != conv.kernel
                {
                    return Err(ConvertError::InvalidValue {
                        field: format!("{field}.weights"),
                        message: format!(
                            "weight shape {wshape:?} does not match out_channels {} and kernel {:?}",
                            conv.out_channels, conv.kernel
                        ),
                    });
                }
                if conv.has_bias {
                    let (_, b) = load_blob(manifest, blobs, string(p, &field, "bias")?, &format!("{field}.bias"))?;
                    if b.len() != conv.out_channels {
                        return Err(ConvertError::InvalidValue {
                            field: format!("{field}.bias"),
                            message: format!("bias has {} values for {} channels", b.len(), conv.out_channels),
                        });
                    }
                    w.extend(b);
                }
                (LayerParams::Conv(conv), Some(w))
            }
            "batch_norm" => {
                fold_into_conv(manifest, blobs, layer, &field, &inputs, &mut pending)?;
                aliases.insert(layer.name.clone(), inputs[0].clone());
                folded.insert(inputs[0].clone());
                continue;
            }
            "activate" => {
                let act = match string(p, &field, "activation")? {
                    "none" => Activation::None,
                    "relu" => Activation::Relu,
                    "relu6" => Activation::Relu6,
                    "leaky_relu" => Activation::LeakyRelu {
                        slope: float(p, &field, "slope", DEFAULT_LEAKY_SLOPE)? as f32,
                    },
                    other => {
                        return Err(ConvertError::InvalidValue {
                            field: format!("{field}.activation"),
                            message: format!("unknown activation `{other}` (expected none, relu, relu6, leaky_relu)"),
                        })
                    }
                };
                (LayerParams::Activate(act), None)
            }
            "max_pool" => {
                let kernel = pair(p, &field, "kernel", None)?;
                let stride = match p.get("stride") {
                    Some(_) => pair(p, &field, "stride", None)?,
                    None => kernel,
                };
                (LayerParams::MaxPool { kernel, stride }, None)
            }
            "upsample" => (
                LayerParams::Upsample {
                    factor: int(p, &field, "factor", Some(2))?,
                },
                None,
            ),
            "concat" => (LayerParams::Concat, None),
            "add" => (LayerParams::Add, None),
            other => {
                return Err(ConvertError::UnsupportedOperator {
                    layer: layer.name.clone(),
                    kind: other.into(),
                })
            }
        };
        pending.push(Pending {
            name: layer.name.clone(),
            params,
            inputs,
            weights,
        });
    }

    let ids: HashMap<String, u32> = pending
        .iter()
        .enumerate()
        .map(|(i, l)| (l.name.clone(), i as u32))
        .collect();

    let head = &manifest.head;
    if head.strides.len() != head.outputs.len() || head.anchors.len() != head.outputs.len() {
        return Err(ConvertError::InvalidValue {
            field: "head".into(),
            message: format!(
                "{} outputs, {} strides and {} anchor lists must have equal length",
                head.outputs.len(),
                head.strides.len(),
                head.anchors.len()
            ),
        });
    }
    let mut scales = Vec::with_capacity(head.outputs.len());
    for (k, name) in head.outputs.iter().enumerate() {
        let resolved = aliases.get(name).unwrap_or(name);
        let layer = *ids.get(resolved).ok_or_else(|| ConvertError::UnknownLayer {
            field: format!("head.outputs[{k}]"),
            name: name.clone(),
        })?;
        scales.push(HeadScale {
            layer,
            stride: narrow(&format!("head.strides[{k}]"), &head.strides[k])?,
            anchors: head.anchors[k].iter().map(|&(w, h)| (w as f32, h as f32)).collect(),
        });
    }
    let head = HeadConfig {
        scales,
        num_classes: head.class_names.len(),
        class_names: head.class_names.clone(),
    };

    let mut layers = Vec::with_capacity(pending.len());
    let mut weights = BTreeMap::new();
    for (i, l) in pending.into_iter().enumerate() {
        let id = i as u32;
        let inputs = l.inputs.iter().map(|n| ids[n]).collect();
        if let Some(w) = l.weights {
            weights.insert(id, w);
        }
        layers.push(LayerDesc::new(id, l.params, inputs));
    }
    let graph = ModelGraph::new(layers, weights, head, manifest.metadata.clone());
    validate(&graph)?;
    Ok(graph)
}

fn fold_into_conv(
    manifest: &Manifest,
    blobs: &HashMap<String, Vec<u8>>,
    layer: &ManifestLayer,
    field: &str,
    inputs: &[String],
    pending: &mut [Pending],
) -> Result<(), ConvertError> {
    let bn_err = |message: String| ConvertError::BatchNorm {
        layer: layer.name.clone(),
        message,
    };
    if inputs.len() != 1 {
        return Err(bn_err(format!("takes exactly one input, found {}", inputs.len())));
    }
    let source = &inputs[0];
    if pending.iter().any(|l| l.inputs.contains(source)) {
        return Err(bn_err(format!("conv `{source}` has other consumers, cannot fold")));
    }
    let conv_layer = pending
        .iter_mut()
        .find(|l| &l.name == source)
        .expect("inputs were checked");
    let LayerParams::Conv(conv) = &mut conv_layer.params else {
        return Err(bn_err(format!(
            "input `{source}` is not a conv layer; standalone batch norm is not supported"
        )));
    };
    let p = &layer.params;
    let load = |key: &str| -> Result<Vec<f32>, ConvertError> {
        let (_, v) = load_blob(manifest, blobs, string(p, field, key)?, &format!("{field}.{key}"))?;
        if v.len() != conv.out_channels {
            return Err(bn_err(format!(
                "`{key}` has {} values for {} channels",
                v.len(),
                conv.out_channels
            )));
        }
        Ok(v)
    };
    let gamma = load("gamma")?;
    let beta = load("beta")?;
    let mean = load("mean")?;
    let var = load("var")?;
    let eps = float(p, field, "eps", DEFAULT_BN_EPS)?;
    if eps < 0.0 {
        return Err(bn_err(format!("eps must be non-negative, found {eps}")));
    }
    if let Some(i) = var.iter().position(|&v| f64::from(v) + eps <= 0.0) {
        return Err(bn_err(format!("var[{i}] + eps must be positive")));
    }

    let blob = conv_layer.weights.take().expect("conv layers own weights");
    let split = if conv.has_bias { blob.len() - conv.out_channels } else { blob.len() };
    let (w, b) = blob.split_at(split);
    let bias = conv.has_bias.then_some(b);
    let (mut folded, folded_bias) = fold_batch_norm(w, bias, conv.out_channels, &gamma, &beta, &mean, &var, eps);
    if let Some(i) = folded.iter().chain(&folded_bias).position(|v| !v.is_finite()) {
        return Err(bn_err(format!("folding produced a non-finite value at element {i}")));
    }
    folded.extend(folded_bias);
    conv.has_bias = true;
    conv_layer.weights = Some(folded);
    Ok(())
}
