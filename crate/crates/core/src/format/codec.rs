use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use super::validate::{validate, ValidationError, ViolationKind, ViolationSite};
use super::{
    HeadConfig, HeadScale, LayerDesc, LayerKind, LayerParams, ModelGraph, FORMAT_VERSION, MAGIC,
};
use crate::ops::{Activation, ConvParams};

/// Fixed header: magic, version, flags.
const HEADER_LEN: usize = 8;
const CONV_PARAM_LEN: usize = 8 * 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Header,
    Metadata,
    Graph,
    Head,
    Weights,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::Header => "header",
            Section::Metadata => "metadata",
            Section::Graph => "graph",
            Section::Head => "head",
            Section::Weights => "weights",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadMagic,
    UnsupportedVersion(u16),
    UnsupportedFlags(u16),
    Truncated { section: Section },
    InvalidMetadata(String),
    UnknownLayerKind(u8),
    InvalidLayer(String),
    DagViolation(String),
    HeadMismatch(String),
    OversizeBlob { declared: u64, available: u64 },
    InvalidBlob(String),
    InvalidGraph(String),
    TrailingBytes(usize),
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::BadMagic => write!(f, "bad magic (expected \"MEF1\")"),
            ParseErrorKind::UnsupportedVersion(v) => {
                write!(f, "unsupported format version {v} (supported: {FORMAT_VERSION})")
            }
            ParseErrorKind::UnsupportedFlags(bits) => write!(f, "unsupported flag bits {bits:#06x}"),
            ParseErrorKind::Truncated { section } => write!(f, "truncated {section} section"),
            ParseErrorKind::InvalidMetadata(m) => write!(f, "invalid metadata: {m}"),
            ParseErrorKind::UnknownLayerKind(k) => write!(f, "unknown layer kind code {k}"),
            ParseErrorKind::InvalidLayer(m) => write!(f, "invalid layer: {m}"),
            ParseErrorKind::DagViolation(m) => write!(f, "graph is not a DAG in table order: {m}"),
            ParseErrorKind::HeadMismatch(m) => write!(f, "head/channel mismatch: {m}"),
            ParseErrorKind::OversizeBlob {
                declared,
                available,
            } => write!(
                f,
                "weight blob declares {declared} bytes but only {available} remain in the section"
            ),
            ParseErrorKind::InvalidBlob(m) => write!(f, "invalid weight blob: {m}"),
            ParseErrorKind::InvalidGraph(m) => write!(f, "invalid graph: {m}"),
            ParseErrorKind::TrailingBytes(n) => write!(f, "{n} trailing bytes after the weight section"),
        }
    }
}

/// A rejected model file. `offset` is the byte position the problem was found at.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at byte offset {offset}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub offset: usize,
}

/// Byte reader bounded to one section of the file.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
    section: Section,
}

impl<'a> Reader<'a> {
    fn err(&self, kind: ParseErrorKind) -> ParseError {
        ParseError {
            kind,
            offset: self.pos,
        }
    }

    fn remaining(&self) -> usize {
        self.end - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        if n > self.remaining() {
            return Err(self.err(ParseErrorKind::Truncated {
                section: self.section,
            }));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ParseError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ParseError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ParseError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ParseError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, ParseError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, ParseError> {
        Ok(self.u32()? as usize)
    }

    /// Reads a length prefix and returns a reader confined to that many bytes.
    fn section(&mut self, section: Section, wide: bool) -> Result<Reader<'a>, ParseError> {
        self.section = section;
        let len_at = self.pos;
        let len = if wide { self.u64()? } else { u64::from(self.u32()?) };
        if len > self.remaining() as u64 {
            return Err(ParseError {
                kind: ParseErrorKind::Truncated { section },
                offset: len_at,
            });
        }
        let start = self.pos;
        self.pos += len as usize;
        Ok(Reader {
            bytes: self.bytes,
            pos: start,
            end: start + len as usize,
            section,
        })
    }

    fn is_done(&self) -> bool {
        self.pos == self.end
    }
}

/// Offsets of graph elements, used to point validation failures at bytes.
#[derive(Default)]
struct Locations {
    metadata: usize,
    head: usize,
    graph: usize,
    layers: HashMap<u32, usize>,
    blobs: HashMap<u32, usize>,
}

/// Parses and validates a MEF file. Never panics and never allocates more
/// than the input length implies.
pub fn parse_model(bytes: &[u8]) -> Result<ModelGraph, ParseError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        end: bytes.len(),
        section: Section::Header,
    };
    if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
        return Err(r.err(ParseErrorKind::BadMagic));
    }
    r.pos = 4;
    let version_at = r.pos;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(ParseError {
            kind: ParseErrorKind::UnsupportedVersion(version),
            offset: version_at,
        });
    }
    let flags_at = r.pos;
    let flags = r.u16()?;
    if flags != 0 {
        return Err(ParseError {
            kind: ParseErrorKind::UnsupportedFlags(flags),
            offset: flags_at,
        });
    }

    let mut loc = Locations {
        metadata: r.pos,
        ..Default::default()
    };
    let mut meta = r.section(Section::Metadata, false)?;
    let metadata = parse_metadata(&mut meta)?;

    loc.graph = r.pos;
    let mut graph_section = r.section(Section::Graph, false)?;
    let layers = parse_layers(&mut graph_section, &mut loc)?;

    loc.head = r.pos;
    let mut head_section = r.section(Section::Head, false)?;
    let head = parse_head(&mut head_section)?;

    let mut weight_section = r.section(Section::Weights, true)?;
    let weights = parse_weights(&mut weight_section, &layers, &mut loc)?;

    if !r.is_done() {
        return Err(r.err(ParseErrorKind::TrailingBytes(r.remaining())));
    }

    let graph = ModelGraph {
        version,
        layers,
        weights,
        head,
        metadata,
    };
    if let Err(e) = validate(&graph) {
        return Err(locate(e, &loc));
    }
    Ok(graph)
}

fn locate(err: ValidationError, loc: &Locations) -> ParseError {
    let first = &err.violations[0];
    let offset = match first.site {
        ViolationSite::Graph => loc.graph,
        ViolationSite::Layer(id) => loc.layers.get(&id).copied().unwrap_or(loc.graph),
        ViolationSite::Blob(id) => loc
            .blobs
            .get(&id)
            .or_else(|| loc.layers.get(&id))
            .copied()
            .unwrap_or(loc.graph),
        ViolationSite::Head => loc.head,
        ViolationSite::Metadata => loc.metadata,
    };
    let message = first.to_string();
    let kind = match first.kind {
        ViolationKind::Dag => ParseErrorKind::DagViolation(message),
        ViolationKind::Head => ParseErrorKind::HeadMismatch(message),
        ViolationKind::Weights => ParseErrorKind::InvalidBlob(message),
        ViolationKind::Metadata => ParseErrorKind::InvalidMetadata(message),
        ViolationKind::Params => ParseErrorKind::InvalidLayer(message),
        ViolationKind::Structure | ViolationKind::Shape => ParseErrorKind::InvalidGraph(message),
    };
    ParseError { kind, offset }
}

fn parse_metadata(r: &mut Reader<'_>) -> Result<BTreeMap<String, String>, ParseError> {
    let start = r.pos;
    let raw = r.take(r.remaining())?;
    let text = std::str::from_utf8(raw).map_err(|e| ParseError {
        kind: ParseErrorKind::InvalidMetadata(format!("not UTF-8: {e}")),
        offset: start + e.valid_up_to(),
    })?;
    serde_json::from_str(text).map_err(|e| ParseError {
        kind: ParseErrorKind::InvalidMetadata(e.to_string()),
        offset: start,
    })
}

fn parse_layers(r: &mut Reader<'_>, loc: &mut Locations) -> Result<Vec<LayerDesc>, ParseError> {
    let mut layers = Vec::new();
    while !r.is_done() {
        let at = r.pos;
        let id = r.u32()?;
        let code_at = r.pos;
        let code = r.u8()?;
        let kind = LayerKind::from_code(code).ok_or(ParseError {
            kind: ParseErrorKind::UnknownLayerKind(code),
            offset: code_at,
        })?;
        let param_len_at = r.pos;
        let param_len = r.usize()?;
        let expected = param_block_len(kind);
        if param_len != expected {
            return Err(ParseError {
                kind: ParseErrorKind::InvalidLayer(format!(
                    "{} parameter block is {param_len} bytes, expected {expected}",
                    kind.name()
                )),
                offset: param_len_at,
            });
        }
        let params = parse_params(kind, r)?;
        let count = r.u8()? as usize;
        let mut inputs = Vec::with_capacity(count.min(r.remaining() / 4));
        for _ in 0..count {
            inputs.push(r.u32()?);
        }
        loc.layers.entry(id).or_insert(at);
        layers.push(LayerDesc { id, params, inputs });
    }
    Ok(layers)
}

fn param_block_len(kind: LayerKind) -> usize {
    match kind {
        LayerKind::Input => 12,
        LayerKind::Conv => CONV_PARAM_LEN,
        LayerKind::Activate => 5,
        LayerKind::MaxPool => 16,
        LayerKind::Upsample => 4,
        LayerKind::Concat | LayerKind::Add => 0,
    }
}

fn parse_params(kind: LayerKind, r: &mut Reader<'_>) -> Result<LayerParams, ParseError> {
    let at = r.pos;
    let invalid = |msg: String| ParseError {
        kind: ParseErrorKind::InvalidLayer(msg),
        offset: at,
    };
    Ok(match kind {
        LayerKind::Input => LayerParams::Input {
            channels: r.usize()?,
            height: r.usize()?,
            width: r.usize()?,
        },
        LayerKind::Conv => {
            let out_channels = r.usize()?;
            let kernel = (r.usize()?, r.usize()?);
            let stride = (r.usize()?, r.usize()?);
            let padding = (r.usize()?, r.usize()?);
            let groups = r.usize()?;
            let has_bias = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(invalid(format!("bias flag must be 0 or 1, found {other}"))),
            };
            LayerParams::Conv(ConvParams {
                out_channels,
                kernel,
                stride,
                padding,
                groups,
                has_bias,
            })
        }
        LayerKind::Activate => {
            let code = r.u8()?;
            let slope = r.f32()?;
            LayerParams::Activate(match code {
                0 => Activation::None,
                1 => Activation::Relu,
                2 => Activation::Relu6,
                3 => Activation::LeakyRelu { slope },
                other => return Err(invalid(format!("unknown activation code {other}"))),
            })
        }
        LayerKind::MaxPool => LayerParams::MaxPool {
            kernel: (r.usize()?, r.usize()?),
            stride: (r.usize()?, r.usize()?),
        },
        LayerKind::Upsample => LayerParams::Upsample { factor: r.usize()? },
        LayerKind::Concat => LayerParams::Concat,
        LayerKind::Add => LayerParams::Add,
    })
}

fn parse_head(r: &mut Reader<'_>) -> Result<HeadConfig, ParseError> {
    let num_classes = r.usize()?;
    let scale_count_at = r.pos;
    let scale_count = r.usize()?;
    if scale_count > 3 {
        return Err(ParseError {
            kind: ParseErrorKind::HeadMismatch(format!("{scale_count} scales declared, at most 3 allowed")),
            offset: scale_count_at,
        });
    }
    let mut scales = Vec::with_capacity(scale_count);
    for _ in 0..scale_count {
        let layer = r.u32()?;
        let stride = r.usize()?;
        let count = r.usize()?;
        if count.saturating_mul(8) > r.remaining() {
            return Err(r.err(ParseErrorKind::Truncated {
                section: Section::Head,
            }));
        }
        let mut anchors = Vec::with_capacity(count);
        for _ in 0..count {
            anchors.push((r.f32()?, r.f32()?));
        }
        scales.push(HeadScale {
            layer,
            stride,
            anchors,
        });
    }
    if num_classes.saturating_mul(4) > r.remaining() {
        return Err(r.err(ParseErrorKind::Truncated {
            section: Section::Head,
        }));
    }
    let mut class_names = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let len = r.usize()?;
        let at = r.pos;
        let raw = r.take(len)?;
        let name = std::str::from_utf8(raw).map_err(|e| ParseError {
            kind: ParseErrorKind::HeadMismatch(format!("class name is not UTF-8: {e}")),
            offset: at,
        })?;
        class_names.push(name.to_string());
    }
    if !r.is_done() {
        return Err(r.err(ParseErrorKind::HeadMismatch(format!(
            "{} unread bytes at the end of the head section",
            r.remaining()
        ))));
    }
    Ok(HeadConfig {
        scales,
        num_classes,
        class_names,
    })
}

fn parse_weights(
    r: &mut Reader<'_>,
    layers: &[LayerDesc],
    loc: &mut Locations,
) -> Result<BTreeMap<u32, Vec<f32>>, ParseError> {
    let mut weights = BTreeMap::new();
    while !r.is_done() {
        let at = r.pos;
        let id = r.u32()?;
        let len_at = r.pos;
        let len = r.u64()?;
        if len > r.remaining() as u64 {
            return Err(ParseError {
                kind: ParseErrorKind::OversizeBlob {
                    declared: len,
                    available: r.remaining() as u64,
                },
                offset: len_at,
            });
        }
        if len % 4 != 0 {
            return Err(ParseError {
                kind: ParseErrorKind::InvalidBlob(format!("length {len} is not a multiple of 4")),
                offset: len_at,
            });
        }
        if !layers.iter().any(|l| l.id == id && l.kind() == LayerKind::Conv) {
            return Err(ParseError {
                kind: ParseErrorKind::InvalidBlob(format!("blob for layer {id}, which is not a conv layer")),
                offset: at,
            });
        }
        let raw = r.take(len as usize)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if weights.insert(id, values).is_some() {
            return Err(ParseError {
                kind: ParseErrorKind::InvalidBlob(format!("duplicate blob for layer {id}")),
                offset: at,
            });
        }
        loc.blobs.insert(id, at);
    }
    Ok(weights)
}

/// Serializes a graph. The output is a pure function of the graph.
pub fn serialize_model(graph: &ModelGraph) -> Result<Vec<u8>, ValidationError> {
    validate(graph)?;
    let metadata = metadata_bytes(graph);
    let layers = layer_bytes(graph);
    let head = head_bytes(&graph.head);
    let weights = weight_bytes(graph);

    let mut out = Vec::with_capacity(HEADER_LEN + 20 + metadata.len() + layers.len() + head.len() + weights.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&graph.version.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for section in [&metadata, &layers, &head] {
        out.extend_from_slice(&(section.len() as u32).to_le_bytes());
        out.extend_from_slice(section);
    }
    out.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    out.extend_from_slice(&weights);
    Ok(out)
}

fn metadata_bytes(graph: &ModelGraph) -> Vec<u8> {
    serde_json::to_vec(&graph.metadata).expect("string map serializes")
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    // Validation caps every integer parameter at 2^28.
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn layer_bytes(graph: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::new();
    for layer in &graph.layers {
        let kind = layer.kind();
        out.extend_from_slice(&layer.id.to_le_bytes());
        out.push(kind as u8);
        put_u32(&mut out, param_block_len(kind));
        match &layer.params {
            LayerParams::Input {
                channels,
                height,
                width,
            } => {
                for v in [*channels, *height, *width] {
                    put_u32(&mut out, v);
                }
            }
            LayerParams::Conv(p) => {
                for v in [
                    p.out_channels,
                    p.kernel.0,
                    p.kernel.1,
                    p.stride.0,
                    p.stride.1,
                    p.padding.0,
                    p.padding.1,
                    p.groups,
                ] {
                    put_u32(&mut out, v);
                }
                out.push(u8::from(p.has_bias));
            }
            LayerParams::Activate(act) => {
                let (code, slope) = match *act {
                    Activation::None => (0u8, 0.0f32),
                    Activation::Relu => (1, 0.0),
                    Activation::Relu6 => (2, 0.0),
                    Activation::LeakyRelu { slope } => (3, slope),
                };
                out.push(code);
                out.extend_from_slice(&slope.to_le_bytes());
            }
            LayerParams::MaxPool { kernel, stride } => {
                for v in [kernel.0, kernel.1, stride.0, stride.1] {
                    put_u32(&mut out, v);
                }
            }
            LayerParams::Upsample { factor } => put_u32(&mut out, *factor),
            LayerParams::Concat | LayerParams::Add => {}
        }
        out.push(layer.inputs.len() as u8);
        for id in &layer.inputs {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    out
}

fn head_bytes(head: &HeadConfig) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, head.num_classes);
    put_u32(&mut out, head.scales.len());
    for scale in &head.scales {
        out.extend_from_slice(&scale.layer.to_le_bytes());
        put_u32(&mut out, scale.stride);
        put_u32(&mut out, scale.anchors.len());
        for &(w, h) in &scale.anchors {
            out.extend_from_slice(&w.to_le_bytes());
            out.extend_from_slice(&h.to_le_bytes());
        }
    }
    for name in &head.class_names {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
    }
    out
}

fn weight_bytes(graph: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::with_capacity(graph.weight_bytes() as usize + graph.weights.len() * 12);
    // Blobs follow layer-table order.
    for layer in &graph.layers {
        if let Some(blob) = graph.weights.get(&layer.id) {
            out.extend_from_slice(&layer.id.to_le_bytes());
            out.extend_from_slice(&(blob.len() as u64 * 4).to_le_bytes());
            for v in blob {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Per-section byte breakdown of a serialized graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct SizeReport {
    pub total: u64,
    pub header: u64,
    pub metadata: u64,
    pub graph: u64,
    pub head: u64,
    pub weight_section: u64,
    /// Raw f32 payload, the sum of all blob sizes.
    pub weight_bytes: u64,
}

impl SizeReport {
    /// Container bytes beyond the raw weights, as a fraction of the raw weights.
    pub fn overhead_ratio(&self) -> f64 {
        if self.weight_bytes == 0 {
            return f64::INFINITY;
        }
        (self.total - self.weight_bytes) as f64 / self.weight_bytes as f64
    }
}

pub fn size_report(graph: &ModelGraph) -> Result<SizeReport, ValidationError> {
    validate(graph)?;
    let metadata = metadata_bytes(graph).len() as u64 + 4;
    let layers = layer_bytes(graph).len() as u64 + 4;
    let head = head_bytes(&graph.head).len() as u64 + 4;
    let weight_section = weight_bytes(graph).len() as u64 + 8;
    let header = HEADER_LEN as u64;
    Ok(SizeReport {
        total: header + metadata + layers + head + weight_section,
        header,
        metadata,
        graph: layers,
        head,
        weight_section,
        weight_bytes: graph.weight_bytes(),
    })
}
