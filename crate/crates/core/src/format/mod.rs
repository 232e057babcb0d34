//! The MEF model container: graph description, validation, the binary codec
//! and the JSON manifest converter.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "MEF1" | u16 version | u16 flags
//! u32 len | metadata: UTF-8 JSON object of string -> string
//! u32 len | layer table: { u32 id, u8 kind, u32 param len, params, u8 input count, u32 ids.. }*
//! u32 len | head: u32 classes, u32 scales, { u32 layer, u32 stride, u32 anchors, (f32 w, f32 h)* }*,
//!           { u32 len, UTF-8 class name }*
//! u64 len | weights: { u32 layer id, u64 byte len, f32 data }*
//! ```

mod codec;
mod manifest;
mod validate;

use std::collections::BTreeMap;

use crate::ops::{Activation, ConvParams};
use crate::tensor::Shape;

pub use codec::{parse_model, serialize_model, size_report, ParseError, ParseErrorKind, SizeReport};
pub use manifest::{
    convert_manifest, fold_batch_norm, BlobSpec, ConvertError, DType, Manifest, SUPPORTED_LAYER_KINDS,
};
pub use validate::{validate, GraphInfo, ValidationError, Violation, ViolationKind, ViolationSite};

pub const MAGIC: [u8; 4] = *b"MEF1";
pub const FORMAT_VERSION: u16 = 1;

/// Metadata keys every model must carry.
pub const META_CLASS_NAMES: &str = "class_names";
pub const META_INPUT_SIZE: &str = "input_size";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum LayerKind {
    Input = 0,
    Conv = 1,
    Activate = 2,
    MaxPool = 3,
    Upsample = 4,
    Concat = 5,
    Add = 6,
}

impl LayerKind {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::Input,
            1 => LayerKind::Conv,
            2 => LayerKind::Activate,
            3 => LayerKind::MaxPool,
            4 => LayerKind::Upsample,
            5 => LayerKind::Concat,
            6 => LayerKind::Add,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv => "conv",
            LayerKind::Activate => "activate",
            LayerKind::MaxPool => "max_pool",
            LayerKind::Upsample => "upsample",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::Concat | LayerKind::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    Conv(ConvParams),
    Activate(Activation),
    MaxPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Upsample {
        factor: usize,
    },
    Concat,
    Add,
}

impl LayerParams {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerParams::Input { .. } => LayerKind::Input,
            LayerParams::Conv(_) => LayerKind::Conv,
            LayerParams::Activate(_) => LayerKind::Activate,
            LayerParams::MaxPool { .. } => LayerKind::MaxPool,
            LayerParams::Upsample { .. } => LayerKind::Upsample,
            LayerParams::Concat => LayerKind::Concat,
            LayerParams::Add => LayerKind::Add,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDesc {
    pub id: u32,
    pub params: LayerParams,
    pub inputs: Vec<u32>,
}

impl LayerDesc {
    pub fn new(id: u32, params: LayerParams, inputs: Vec<u32>) -> Self {
        LayerDesc { id, params, inputs }
    }

    pub fn kind(&self) -> LayerKind {
        self.params.kind()
    }
}

/// One detection scale: which layer feeds it, its grid stride and its anchors
/// (width, height) in network-input pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScale {
    pub layer: u32,
    pub stride: usize,
    pub anchors: Vec<(f32, f32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub scales: Vec<HeadScale>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl HeadConfig {
    /// Channels a head tensor must have at `scale`.
    pub fn channels(&self, scale: usize) -> usize {
        self.scales[scale].anchors.len() * (5 + self.num_classes)
    }

    pub fn strides(&self) -> Vec<usize> {
        self.scales.iter().map(|s| s.stride).collect()
    }

    pub fn output_layers(&self) -> Vec<u32> {
        self.scales.iter().map(|s| s.layer).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub version: u16,
    pub layers: Vec<LayerDesc>,
    /// Conv layer id -> weights in (out, in/groups, kh, kw) order, followed by the bias if any.
    pub weights: BTreeMap<u32, Vec<f32>>,
    pub head: HeadConfig,
    pub metadata: BTreeMap<String, String>,
}

impl ModelGraph {
    /// Assembles a graph and fills in the required metadata keys from the
    /// input layer and head.
    pub fn new(
        layers: Vec<LayerDesc>,
        weights: BTreeMap<u32, Vec<f32>>,
        head: HeadConfig,
        mut metadata: BTreeMap<String, String>,
    ) -> Self {
        metadata.insert(META_CLASS_NAMES.into(), head.class_names.join(","));
        if let Some(LayerParams::Input { height, width, .. }) = layers.first().map(|l| &l.params) {
            metadata.insert(META_INPUT_SIZE.into(), format!("{width}x{height}"));
        }
        ModelGraph {
            version: FORMAT_VERSION,
            layers,
            weights,
            head,
            metadata,
        }
    }

    pub fn layer(&self, id: u32) -> Option<&LayerDesc> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_index(&self, id: u32) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Declared input shape `(1, c, h, w)`, if the first layer is an input layer.
    pub fn input_shape(&self) -> Option<Shape> {
        match self.layers.first()?.params {
            LayerParams::Input {
                channels,
                height,
                width,
            } => Shape::new(1, channels, height, width).ok(),
            _ => None,
        }
    }

    /// Splits a conv layer's blob into (weights, bias).
    pub fn conv_weights(&self, id: u32) -> Option<(&[f32], Option<&[f32]>)> {
        let layer = self.layer(id)?;
        let LayerParams::Conv(p) = &layer.params else {
            return None;
        };
        let blob = self.weights.get(&id)?;
        if p.has_bias {
            let split = blob.len().checked_sub(p.out_channels)?;
            Some((&blob[..split], Some(&blob[split..])))
        } else {
            Some((blob, None))
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(Vec::len).sum()
    }

    /// Raw weight payload in bytes: sum of blob sizes.
    pub fn weight_bytes(&self) -> u64 {
        self.parameter_count() as u64 * 4
    }

    /// Structural equality that compares weights by bit pattern.
    pub fn bitwise_eq(&self, other: &ModelGraph) -> bool {
        self.version == other.version
            && self.layers == other.layers
            && self.metadata == other.metadata
            && head_bitwise_eq(&self.head, &other.head)
            && self.weights.len() == other.weights.len()
            && self.weights.iter().zip(&other.weights).all(|((ia, a), (ib, b))| {
                ia == ib && a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

fn head_bitwise_eq(a: &HeadConfig, b: &HeadConfig) -> bool {
    a.num_classes == b.num_classes
        && a.class_names == b.class_names
        && a.scales.len() == b.scales.len()
        && a.scales.iter().zip(&b.scales).all(|(x, y)| {
            x.layer == y.layer
                && x.stride == y.stride
                && x.anchors.len() == y.anchors.len()
                && x.anchors.iter().zip(&y.anchors).all(|(p, q)| {
                    p.0.to_bits() == q.0.to_bits() && p.1.to_bits() == q.1.to_bits()
                })
        })
}
