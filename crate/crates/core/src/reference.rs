//! Seeded random-weight detector with a YOLO-Fastest-like layout, used for
//! benchmarks, size reports and end-to-end tests.
//!
//! Backbone: a stride-2 stem followed by inverted-residual blocks (pointwise
//! expand, depthwise 3x3, pointwise project, residual add when shapes allow).
//! Two heads at strides 16 and 32, joined by an upsample + concat neck. Every
//! conv except the head outputs is followed by batch norm in the manifest, so
//! converting it exercises BN folding.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::format::{convert_manifest, ConvertError, ModelGraph};

/// `(width, height)` anchors in input pixels, smallest scale first.
pub const REFERENCE_ANCHORS: [[(f32, f32); 3]; 2] = [
    [(12.0, 18.0), (37.0, 49.0), (52.0, 132.0)],
    [(115.0, 73.0), (119.0, 199.0), (242.0, 238.0)],
];
pub const REFERENCE_CLASSES: [&str; 2] = ["mask", "no_mask"];
pub const REFERENCE_SEED: u64 = 0x5eed;

/// A converter manifest plus its raw little-endian blob bytes, keyed by blob name.
#[derive(Debug, Clone)]
pub struct ReferenceManifest {
    pub json: String,
    pub blobs: BTreeMap<String, Vec<u8>>,
}

impl ReferenceManifest {
    pub fn convert(&self) -> Result<ModelGraph, ConvertError> {
        let blobs: HashMap<String, Vec<u8>> = self.blobs.clone().into_iter().collect();
        convert_manifest(&self.json, &blobs)
    }
}

struct Builder {
    rng: ChaCha8Rng,
    layers: Vec<Value>,
    blobs: BTreeMap<String, Vec<u8>>,
    specs: Map<String, Value>,
    channels: HashMap<String, usize>,
}

#[derive(Clone, Copy)]
enum Act {
    Linear,
    Relu6,
    Leaky,
}

impl Builder {
    fn blob(&mut self, name: String, shape: &[usize], values: &[f32]) -> String {
        self.blobs
            .insert(name.clone(), values.iter().flat_map(|v| v.to_le_bytes()).collect());
        self.specs.insert(name.clone(), json!({"dtype": "f32", "shape": shape}));
        name
    }

    fn uniform(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()
    }

    fn push(&mut self, layer: Value, channels: usize) -> String {
        let name = layer["name"].as_str().expect("layer name").to_string();
        self.channels.insert(name.clone(), channels);
        self.layers.push(layer);
        name
    }

    /// Conv + batch norm + optional activation. Returns the last layer name.
    fn conv_bn(&mut self, name: &str, input: &str, out: usize, kernel: usize, stride: usize, depthwise: bool, act: Act) -> String {
        let cin = self.channels[input];
        let groups = if depthwise { cin } else { 1 };
        let fan_in = cin / groups * kernel * kernel;
        let gain = if matches!(act, Act::Linear) { 1.0 } else { 2.0 };
        let bound = (3.0 * gain / fan_in as f32).sqrt();
        let w = self.uniform(out * fan_in, -bound, bound);
        let weights = self.blob(format!("{name}.w"), &[out, cin / groups, kernel, kernel], &w);
        let conv = self.push(
            json!({
                "name": name, "kind": "conv", "inputs": [input],
                "out_channels": out, "kernel": kernel, "stride": stride,
                "padding": kernel / 2, "groups": groups, "weights": weights
            }),
            out,
        );
        let mut bn = Map::new();
        for (key, lo, hi) in [("gamma", 0.8, 1.2), ("beta", -0.1, 0.1), ("mean", -0.1, 0.1), ("var", 0.5, 1.5)] {
            let v = self.uniform(out, lo, hi);
            bn.insert(key.into(), json!(self.blob(format!("{name}.bn.{key}"), &[out], &v)));
        }
        bn.insert("name".into(), json!(format!("{name}.bn")));
        bn.insert("kind".into(), json!("batch_norm"));
        bn.insert("inputs".into(), json!([conv]));
        let last = self.push(Value::Object(bn), out);
        self.activate(name, &last, act)
    }

    fn activate(&mut self, name: &str, input: &str, act: Act) -> String {
        let c = self.channels[input];
        match act {
            Act::Linear => input.to_string(),
            Act::Relu6 => self.push(
                json!({"name": format!("{name}.act"), "kind": "activate", "inputs": [input], "activation": "relu6"}),
                c,
            ),
            Act::Leaky => self.push(
                json!({"name": format!("{name}.act"), "kind": "activate", "inputs": [input],
                       "activation": "leaky_relu", "slope": 0.1}),
                c,
            ),
        }
    }

    fn inverted_residual(&mut self, name: &str, input: &str, out: usize, stride: usize, expand: usize) -> String {
        let cin = self.channels[input];
        let hidden = cin * expand;
        let x = self.conv_bn(&format!("{name}.expand"), input, hidden, 1, 1, false, Act::Relu6);
        let x = self.conv_bn(&format!("{name}.dw"), &x, hidden, 3, stride, true, Act::Relu6);
        let x = self.conv_bn(&format!("{name}.project"), &x, out, 1, 1, false, Act::Linear);
        if stride == 1 && cin == out {
            self.push(json!({"name": format!("{name}.add"), "kind": "add", "inputs": [input, x]}), out)
        } else {
            x
        }
    }

    /// Plain 1x1 conv with bias producing raw head logits.
    fn head(&mut self, name: &str, input: &str, anchors: usize, classes: usize) -> String {
        let cin = self.channels[input];
        let out = anchors * (5 + classes);
        let bound = (1.0 / cin as f32).sqrt();
        let w = self.uniform(out * cin, -bound, bound);
        let mut b = self.uniform(out, -0.5, 0.5);
        // Start objectness low so random weights yield a realistic handful of boxes.
        for a in 0..anchors {
            b[a * (5 + classes) + 4] -= 3.0;
        }
        let weights = self.blob(format!("{name}.w"), &[out, cin, 1, 1], &w);
        let bias = self.blob(format!("{name}.b"), &[out], &b);
        self.push(
            json!({"name": name, "kind": "conv", "inputs": [input], "out_channels": out,
                   "kernel": 1, "weights": weights, "bias": bias}),
            out,
        )
    }
}

/// Builds the reference manifest for a square `input_size` input.
/// `input_size` must be a multiple of 32.
pub fn reference_manifest(seed: u64, input_size: usize) -> ReferenceManifest {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        layers: Vec::new(),
        blobs: BTreeMap::new(),
        specs: Map::new(),
        channels: HashMap::from([("input".to_string(), 3)]),
    };
    let mut x = b.conv_bn("stem", "input", 16, 3, 2, false, Act::Relu6);
    // (out channels, stride, expansion, repeats)
    let stages = [(16, 2, 2, 1), (24, 2, 4, 2), (32, 2, 4, 2), (64, 1, 4, 2), (96, 2, 4, 2)];
    let mut stride16 = String::new();
    for (s, &(out, stride, expand, repeats)) in stages.iter().enumerate() {
        for r in 0..repeats {
            let st = if r == 0 { stride } else { 1 };
            x = b.inverted_residual(&format!("s{s}.b{r}"), &x, out, st, expand);
        }
        if out == 64 {
            stride16 = x.clone();
        }
    }

    let p = b.conv_bn("neck32.pw1", &x, 128, 1, 1, false, Act::Leaky);
    let p = b.conv_bn("neck32.dw", &p, 128, 3, 1, true, Act::Leaky);
    let p32 = b.conv_bn("neck32.pw2", &p, 128, 1, 1, false, Act::Leaky);
    let classes = REFERENCE_CLASSES.len();
    let head32 = b.head("head32", &p32, 3, classes);

    let up = b.conv_bn("neck16.reduce", &p32, 64, 1, 1, false, Act::Leaky);
    let up = b.push(json!({"name": "neck16.up", "kind": "upsample", "inputs": [up], "factor": 2}), 64);
    let cat = b.push(json!({"name": "neck16.cat", "kind": "concat", "inputs": [up, stride16]}), 128);
    let p = b.conv_bn("neck16.dw", &cat, 128, 3, 1, true, Act::Leaky);
    let p16 = b.conv_bn("neck16.pw", &p, 96, 1, 1, false, Act::Leaky);
    let head16 = b.head("head16", &p16, 3, classes);

    let manifest = json!({
        "input": {"channels": 3, "height": input_size, "width": input_size},
        "layers": b.layers,
        "head": {
            "outputs": [head16, head32],
            "strides": [16, 32],
            "anchors": REFERENCE_ANCHORS,
            "class_names": REFERENCE_CLASSES,
        },
        "metadata": {"name": "reference", "seed": seed.to_string()},
        "blobs": b.specs,
    });
    ReferenceManifest {
        json: serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        blobs: b.blobs,
    }
}

/// The converted reference model.
pub fn reference_model(seed: u64, input_size: usize) -> ModelGraph {
    reference_manifest(seed, input_size)
        .convert()
        .expect("reference manifest converts")
}
