use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use super::{LayerKind, LayerParams, ModelGraph, META_CLASS_NAMES, META_INPUT_SIZE};
use crate::ops::{conv_output_shape, merged_shape, pool_output_shape, upsample_output_shape};
use crate::tensor::{Shape, DEFAULT_ELEMENT_CAP};

/// Integer parameters above this are rejected outright; it keeps every shape
/// computation far from overflow and every value representable as `u32`.
const MAX_PARAM: usize = DEFAULT_ELEMENT_CAP;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Structure,
    Dag,
    Params,
    Shape,
    Weights,
    Head,
    Metadata,
}

/// Where in the graph a violation was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationSite {
    Graph,
    Layer(u32),
    Blob(u32),
    Head,
    Metadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub site: ViolationSite,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.site {
            ViolationSite::Graph => write!(f, "{}", self.message),
            ViolationSite::Layer(id) => write!(f, "layer {id}: {}", self.message),
            ViolationSite::Blob(id) => write!(f, "weights of layer {id}: {}", self.message),
            ViolationSite::Head => write!(f, "head: {}", self.message),
            ViolationSite::Metadata => write!(f, "metadata: {}", self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid model graph ({} violation(s)): {}", .violations.len(), join(.violations))]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

fn join(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Facts established while validating a graph.
#[derive(Debug, Clone)]
pub struct GraphInfo {
    /// Output shape of each layer, in layer-table order.
    pub shapes: Vec<Shape>,
    /// For each layer, the table indices of the layers that consume it.
    pub consumers: Vec<Vec<usize>>,
    /// Table index of each head scale's output layer.
    pub head_layers: Vec<usize>,
}

impl GraphInfo {
    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }
}

struct Collector(Vec<Violation>);

impl Collector {
    fn push(&mut self, kind: ViolationKind, site: ViolationSite, message: impl Into<String>) {
        self.0.push(Violation {
            kind,
            site,
            message: message.into(),
        });
    }
}

/// Checks every structural, shape, weight, head and metadata invariant and
/// propagates shapes from the declared input. Reports all violations found.
pub fn validate(graph: &ModelGraph) -> Result<GraphInfo, ValidationError> {
    let mut v = Collector(Vec::new());
    let layers = &graph.layers;

    if graph.version != super::FORMAT_VERSION {
        v.push(
            ViolationKind::Structure,
            ViolationSite::Graph,
            format!("unsupported version {}", graph.version),
        );
    }
    if layers.is_empty() {
        v.push(ViolationKind::Structure, ViolationSite::Graph, "graph has no layers");
        return Err(ValidationError { violations: v.0 });
    }
    if layers[0].kind() != LayerKind::Input {
        v.push(
            ViolationKind::Structure,
            ViolationSite::Layer(layers[0].id),
            "first layer must be the input layer",
        );
    }

    let mut index_of: HashMap<u32, usize> = HashMap::with_capacity(layers.len());
    let mut shapes: Vec<Option<Shape>> = Vec::with_capacity(layers.len());
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); layers.len()];

    for (i, layer) in layers.iter().enumerate() {
        let site = ViolationSite::Layer(layer.id);
        if index_of.contains_key(&layer.id) {
            v.push(ViolationKind::Structure, site, "duplicate layer id");
        }
        let kind = layer.kind();
        if i > 0 && kind == LayerKind::Input {
            v.push(ViolationKind::Structure, site, "only one input layer is supported");
        }
        if layer.inputs.len() != kind.arity() {
            v.push(
                ViolationKind::Structure,
                site,
                format!(
                    "{} takes {} input(s), found {}",
                    kind.name(),
                    kind.arity(),
                    layer.inputs.len()
                ),
            );
        }

        let mut input_shapes = Vec::with_capacity(layer.inputs.len());
        let mut inputs_ok = layer.inputs.len() == kind.arity();
        for &src in &layer.inputs {
            match index_of.get(&src) {
                Some(&j) => {
                    consumers[j].push(i);
                    match shapes[j] {
                        Some(s) => input_shapes.push(s),
                        None => inputs_ok = false,
                    }
                }
                None => {
                    inputs_ok = false;
                    let msg = if layers.iter().any(|l| l.id == src) {
                        format!("input {src} does not precede its consumer")
                    } else {
                        format!("input {src} does not exist")
                    };
                    v.push(ViolationKind::Dag, site, msg);
                }
            }
        }

        let shape = check_params(&layer.params, &mut v, site).and_then(|()| {
            if !inputs_ok && kind != LayerKind::Input {
                return None;
            }
            propagate(&layer.params, &input_shapes)
                .map_err(|msg| v.push(ViolationKind::Shape, site, msg))
                .ok()
        });
        index_of.entry(layer.id).or_insert(i);
        shapes.push(shape);
    }

    check_weights(graph, &index_of, &shapes, &mut v);
    let head_layers = check_head(graph, &index_of, &shapes, &mut v);
    check_dangling(graph, &consumers, &head_layers, &mut v);
    check_metadata(graph, &mut v);

    if !v.0.is_empty() {
        return Err(ValidationError { violations: v.0 });
    }
    Ok(GraphInfo {
        shapes: shapes.into_iter().map(|s| s.expect("validated")).collect(),
        consumers,
        head_layers,
    })
}

fn check_params(params: &LayerParams, v: &mut Collector, site: ViolationSite) -> Option<()> {
    let too_big = |values: &[usize]| values.iter().any(|&x| x > MAX_PARAM);
    let problem = match params {
        LayerParams::Input {
            channels,
            height,
            width,
        } => (too_big(&[*channels, *height, *width]) || *channels == 0 || *height == 0 || *width == 0)
            .then(|| "input dimensions must lie in [1, 2^28]".to_string()),
        LayerParams::Conv(p) => {
            let all = [
                p.out_channels,
                p.kernel.0,
                p.kernel.1,
                p.stride.0,
                p.stride.1,
                p.padding.0,
                p.padding.1,
                p.groups,
            ];
            if too_big(&all) {
                Some("conv parameter exceeds 2^28".to_string())
            } else if p.out_channels == 0
                || p.kernel.0 == 0
                || p.kernel.1 == 0
                || p.stride.0 == 0
                || p.stride.1 == 0
                || p.groups == 0
            {
                Some(format!("conv parameters must be >= 1: {p:?}"))
            } else {
                None
            }
        }
        LayerParams::Activate(act) => act.validate().err().map(|e| e.to_string()),
        LayerParams::MaxPool { kernel, stride } => {
            let all = [kernel.0, kernel.1, stride.0, stride.1];
            (too_big(&all) || all.contains(&0)).then(|| "pool kernel and stride must lie in [1, 2^28]".to_string())
        }
        LayerParams::Upsample { factor } => (*factor == 0 || *factor > MAX_PARAM)
            .then(|| "upsample factor must lie in [1, 2^28]".to_string()),
        LayerParams::Concat | LayerParams::Add => None,
    };
    match problem {
        Some(msg) => {
            v.push(ViolationKind::Params, site, msg);
            None
        }
        None => Some(()),
    }
}

fn propagate(params: &LayerParams, inputs: &[Shape]) -> Result<Shape, String> {
    let out = match params {
        LayerParams::Input {
            channels,
            height,
            width,
        } => Shape::new(1, *channels, *height, *width).map_err(|e| e.to_string())?,
        LayerParams::Conv(p) => conv_output_shape(inputs[0], p).map_err(|e| e.to_string())?,
        LayerParams::Activate(_) => inputs[0],
        LayerParams::MaxPool { kernel, stride } => {
            pool_output_shape(inputs[0], *kernel, *stride).map_err(|e| e.to_string())?
        }
        LayerParams::Upsample { factor } => {
            upsample_output_shape(inputs[0], *factor).map_err(|e| e.to_string())?
        }
        LayerParams::Concat => merged_shape(inputs[0], inputs[1], true).map_err(|e| e.to_string())?,
        LayerParams::Add => merged_shape(inputs[0], inputs[1], false).map_err(|e| e.to_string())?,
    };
    out.check(DEFAULT_ELEMENT_CAP).map_err(|e| e.to_string())?;
    Ok(out)
}

fn check_weights(
    graph: &ModelGraph,
    index_of: &HashMap<u32, usize>,
    shapes: &[Option<Shape>],
    v: &mut Collector,
) {
    for (i, layer) in graph.layers.iter().enumerate() {
        let LayerParams::Conv(p) = &layer.params else {
            continue;
        };
        let Some(blob) = graph.weights.get(&layer.id) else {
            v.push(ViolationKind::Weights, ViolationSite::Layer(layer.id), "conv layer has no weight blob");
            continue;
        };
        let in_channels = layer
            .inputs
            .first()
            .and_then(|src| index_of.get(src))
            .filter(|&&j| j < i)
            .and_then(|&j| shapes[j])
            .map(|s| s.c);
        if let Some(in_c) = in_channels {
            if p.groups != 0 && in_c % p.groups == 0 {
                let expected = p.weight_len(in_c) + if p.has_bias { p.out_channels } else { 0 };
                if blob.len() != expected {
                    v.push(
                        ViolationKind::Weights,
                        ViolationSite::Blob(layer.id),
                        format!("blob holds {} values, expected {expected}", blob.len()),
                    );
                }
            }
        }
        if let Some(pos) = blob.iter().position(|x| !x.is_finite()) {
            v.push(
                ViolationKind::Weights,
                ViolationSite::Blob(layer.id),
                format!("non-finite weight at element {pos}"),
            );
        }
    }
    for &id in graph.weights.keys() {
        match index_of.get(&id).map(|&i| graph.layers[i].kind()) {
            Some(LayerKind::Conv) => {}
            Some(kind) => v.push(
                ViolationKind::Weights,
                ViolationSite::Blob(id),
                format!("{} layers carry no weights", kind.name()),
            ),
            None => v.push(
                ViolationKind::Weights,
                ViolationSite::Blob(id),
                "blob references an unknown layer",
            ),
        }
    }
}

fn check_head(
    graph: &ModelGraph,
    index_of: &HashMap<u32, usize>,
    shapes: &[Option<Shape>],
    v: &mut Collector,
) -> Vec<usize> {
    let head = &graph.head;
    let site = ViolationSite::Head;
    if !(1..=3).contains(&head.scales.len()) {
        v.push(
            ViolationKind::Head,
            site,
            format!("head must have 1 to 3 scales, found {}", head.scales.len()),
        );
    }
    if head.num_classes == 0 || head.num_classes > MAX_PARAM {
        v.push(ViolationKind::Head, site, "num_classes must be >= 1");
    }
    if head.class_names.len() != head.num_classes {
        v.push(
            ViolationKind::Head,
            site,
            format!(
                "{} class names for {} classes",
                head.class_names.len(),
                head.num_classes
            ),
        );
    }
    let mut seen_names = HashSet::new();
    for name in &head.class_names {
        if name.is_empty() || name.contains(',') || !seen_names.insert(name) {
            v.push(
                ViolationKind::Head,
                site,
                format!("class name {name:?} must be non-empty, unique and comma-free"),
            );
        }
    }

    let input = shapes.first().copied().flatten();
    let mut head_layers = Vec::with_capacity(head.scales.len());
    let mut seen_layers = HashSet::new();
    for (k, scale) in head.scales.iter().enumerate() {
        if !seen_layers.insert(scale.layer) {
            v.push(ViolationKind::Head, site, format!("scale {k}: layer {} used twice", scale.layer));
        }
        if scale.anchors.is_empty() || scale.anchors.len() > MAX_PARAM {
            v.push(ViolationKind::Head, site, format!("scale {k}: no anchors"));
        }
        if scale
            .anchors
            .iter()
            .any(|&(w, h)| !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0))
        {
            v.push(ViolationKind::Head, site, format!("scale {k}: anchors must be finite and positive"));
        }
        if scale.stride == 0 || scale.stride > MAX_PARAM {
            v.push(ViolationKind::Head, site, format!("scale {k}: stride must be >= 1"));
            continue;
        }
        let Some(&index) = index_of.get(&scale.layer) else {
            v.push(
                ViolationKind::Head,
                site,
                format!("scale {k}: output layer {} does not exist", scale.layer),
            );
            continue;
        };
        head_layers.push(index);
        let (Some(out), Some(input)) = (shapes[index], input) else {
            continue;
        };
        let channels = scale.anchors.len().saturating_mul(5usize.saturating_add(head.num_classes));
        if out.c != channels {
            v.push(
                ViolationKind::Head,
                site,
                format!(
                    "scale {k}: layer {} has {} channels, head needs {} anchors x (5 + {}) = {channels}",
                    scale.layer,
                    out.c,
                    scale.anchors.len(),
                    head.num_classes
                ),
            );
        }
        if input.h % scale.stride != 0
            || input.w % scale.stride != 0
            || out.h != input.h / scale.stride
            || out.w != input.w / scale.stride
        {
            v.push(
                ViolationKind::Head,
                site,
                format!(
                    "scale {k}: grid {}x{} does not match input {}x{} at stride {}",
                    out.w, out.h, input.w, input.h, scale.stride
                ),
            );
        }
    }
    head_layers
}

fn check_dangling(graph: &ModelGraph, consumers: &[Vec<usize>], head_layers: &[usize], v: &mut Collector) {
    for (i, layer) in graph.layers.iter().enumerate() {
        if consumers[i].is_empty() && !head_layers.contains(&i) {
            v.push(
                ViolationKind::Structure,
                ViolationSite::Layer(layer.id),
                "layer output is never consumed and does not feed the head",
            );
        }
    }
}

fn check_metadata(graph: &ModelGraph, v: &mut Collector) {
    let site = ViolationSite::Metadata;
    let names = graph.head.class_names.join(",");
    match graph.metadata.get(META_CLASS_NAMES) {
        None => v.push(ViolationKind::Metadata, site, "missing `class_names`"),
        Some(found) if *found != names => v.push(
            ViolationKind::Metadata,
            site,
            format!("`class_names` is {found:?} but the head declares {names:?}"),
        ),
        _ => {}
    }
    let size = match graph.layers.first().map(|l| &l.params) {
        Some(LayerParams::Input { height, width, .. }) => Some(format!("{width}x{height}")),
        _ => None,
    };
    match (graph.metadata.get(META_INPUT_SIZE), size) {
        (None, _) => v.push(ViolationKind::Metadata, site, "missing `input_size`"),
        (Some(found), Some(expected)) if *found != expected => v.push(
            ViolationKind::Metadata,
            site,
            format!("`input_size` is {found:?} but the input layer is {expected}"),
        ),
        _ => {}
    }
}
