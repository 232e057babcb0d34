//! Naive oracles and random-case generators shared by the integration tests.
#![allow(dead_code)]

pub mod suites;

use std::collections::BTreeMap;

use maskedge::detect::{iou, sigmoid, BBox, RawDetection, EXP_CLAMP};
use maskedge::format::{HeadConfig, HeadScale, LayerDesc, LayerParams, ModelGraph};
use maskedge::ops::{Activation, ConvParams};
use maskedge::tensor::{Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, scale: f32) -> Tensor {
    let data = (0..shape.len()).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Six nested loops, f64 accumulation, zero padding handled by bounds checks.
pub fn naive_conv(input: &Tensor, weights: &[f32], bias: Option<&[f32]>, p: &ConvParams) -> Tensor {
    let s = input.shape();
    let (kh, kw) = p.kernel;
    let oh = (s.h + 2 * p.padding.0 - kh) / p.stride.0 + 1;
    let ow = (s.w + 2 * p.padding.1 - kw) / p.stride.1 + 1;
    let icg = s.c / p.groups;
    let ocg = p.out_channels / p.groups;
    let mut out = Tensor::zeros(Shape::new(s.n, p.out_channels, oh, ow).unwrap()).unwrap();
    for n in 0..s.n {
        for oc in 0..p.out_channels {
            let g = oc / ocg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..icg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride.0 + ky) as isize - p.padding.0 as isize;
                                let ix = (ox * p.stride.1 + kx) as isize - p.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let x = input.get(n, g * icg + ic, iy as usize, ix as usize);
                                let w = weights[((oc * icg + ic) * kh + ky) * kw + kx];
                                acc += f64::from(x) * f64::from(w);
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += f64::from(b[oc]);
                    }
                    out.set(n, oc, oy, ox, acc as f32);
                }
            }
        }
    }
    out
}

pub fn naive_activation(x: f32, act: Activation) -> f32 {
    match act {
        Activation::None => x,
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Relu6 => {
            if x < 0.0 {
                0.0
            } else if x > 6.0 {
                6.0
            } else {
                x
            }
        }
        Activation::LeakyRelu { slope } => {
            if x >= 0.0 {
                x
            } else {
                x * slope
            }
        }
    }
}

/// Scans every window; no padding.
pub fn naive_max_pool(input: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Tensor {
    let s = input.shape();
    let oh = (s.h - kernel.0) / stride.0 + 1;
    let ow = (s.w - kernel.1) / stride.1 + 1;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow).unwrap()).unwrap();
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    for ky in 0..kernel.0 {
                        for kx in 0..kernel.1 {
                            best = best.max(input.get(n, c, oy * stride.0 + ky, ox * stride.1 + kx));
                        }
                    }
                    out.set(n, c, oy, ox, best);
                }
            }
        }
    }
    out
}

pub fn naive_upsample(input: &Tensor, factor: usize) -> Tensor {
    let s = input.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.h * factor, s.w * factor).unwrap()).unwrap();
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h * factor {
                for x in 0..s.w * factor {
                    out.set(n, c, y, x, input.get(n, c, y / factor, x / factor));
                }
            }
        }
    }
    out
}

pub fn naive_concat(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    let mut out = Tensor::zeros(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w).unwrap()).unwrap();
    for n in 0..sa.n {
        for y in 0..sa.h {
            for x in 0..sa.w {
                for c in 0..sa.c {
                    out.set(n, c, y, x, a.get(n, c, y, x));
                }
                for c in 0..sb.c {
                    out.set(n, sa.c + c, y, x, b.get(n, c, y, x));
                }
            }
        }
    }
    out
}

pub fn naive_add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

/// Loops over (cell, anchor, class), recomputing every quantity per candidate.
pub fn naive_decode(t: &Tensor, scale: &HeadScale, classes: usize, conf: f32) -> Vec<RawDetection> {
    let s = t.shape();
    let mut out = Vec::new();
    for cy in 0..s.h {
        for cx in 0..s.w {
            for (a, &(aw, ah)) in scale.anchors.iter().enumerate() {
                for class_id in 0..classes {
                    let base = a * (5 + classes);
                    let obj = sigmoid(t.get(0, base + 4, cy, cx));
                    if obj < conf {
                        continue;
                    }
                    let confidence = obj * sigmoid(t.get(0, base + 5 + class_id, cy, cx));
                    if confidence < conf {
                        continue;
                    }
                    let stride = scale.stride as f32;
                    let x = (sigmoid(t.get(0, base, cy, cx)) + cx as f32) * stride;
                    let y = (sigmoid(t.get(0, base + 1, cy, cx)) + cy as f32) * stride;
                    let w = aw * t.get(0, base + 2, cy, cx).min(EXP_CLAMP).exp();
                    let h = ah * t.get(0, base + 3, cy, cx).min(EXP_CLAMP).exp();
                    out.push(RawDetection {
                        class_id,
                        confidence,
                        bbox: BBox::from_center(x, y, w, h),
                    });
                }
            }
        }
    }
    out
}

/// Repeatedly takes the best remaining candidate and deletes everything it
/// overlaps, rescanning the whole remaining set each round.
pub fn brute_force_nms(candidates: &[RawDetection], thr: f32) -> Vec<RawDetection> {
    let mut alive = vec![true; candidates.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..candidates.len() {
            if alive[i] && best.map_or(true, |b| candidates[i].confidence > candidates[b].confidence) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        kept.push(candidates[b]);
        for j in 0..candidates.len() {
            if alive[j]
                && candidates[j].class_id == candidates[b].class_id
                && iou(&candidates[j].bbox, &candidates[b].bbox) >= thr
            {
                alive[j] = false;
            }
        }
    }
    kept
}

struct Node {
    id: u32,
    shape: Shape,
    consumed: bool,
}

struct DagBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    layers: Vec<LayerDesc>,
    weights: BTreeMap<u32, Vec<f32>>,
    nodes: Vec<Node>,
}

impl DagBuilder<'_> {
    fn add(&mut self, params: LayerParams, inputs: &[usize], shape: Shape) -> usize {
        let id = self.layers.len() as u32;
        let ids = inputs.iter().map(|&i| self.nodes[i].id).collect();
        for &i in inputs {
            self.nodes[i].consumed = true;
        }
        if let LayerParams::Conv(p) = &params {
            let cin = self.nodes[inputs[0]].shape.c;
            let fan_in = (cin / p.groups * p.kernel.0 * p.kernel.1) as f32;
            let bound = 1.0 / fan_in.sqrt();
            let n = p.weight_len(cin) + if p.has_bias { p.out_channels } else { 0 };
            let w = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
            self.weights.insert(id, w);
        }
        self.layers.push(LayerDesc::new(id, params, ids));
        self.nodes.push(Node {
            id,
            shape,
            consumed: false,
        });
        self.nodes.len() - 1
    }

    fn conv(&mut self, input: usize, out: usize, k: usize, stride: usize, depthwise: bool) -> usize {
        let s = self.nodes[input].shape;
        let groups = if depthwise { s.c } else { 1 };
        let out = if depthwise { s.c } else { out };
        let p = ConvParams::new(out, k, stride, k / 2)
            .with_groups(groups)
            .with_bias(self.rng.gen_bool(0.7));
        let shape = Shape::new(1, out, (s.h + 2 * (k / 2) - k) / stride + 1, (s.w + 2 * (k / 2) - k) / stride + 1).unwrap();
        self.add(LayerParams::Conv(p), &[input], shape)
    }

    fn pool(&mut self, input: usize) -> usize {
        let s = self.nodes[input].shape;
        let shape = Shape::new(1, s.c, s.h / 2, s.w / 2).unwrap();
        self.add(LayerParams::MaxPool { kernel: (2, 2), stride: (2, 2) }, &[input], shape)
    }

    fn merge(&mut self, a: usize, b: usize) -> usize {
        let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
        if sa == sb && self.rng.gen_bool(0.5) {
            self.add(LayerParams::Add, &[a, b], sa)
        } else {
            let shape = Shape::new(1, sa.c + sb.c, sa.h, sa.w).unwrap();
            self.add(LayerParams::Concat, &[a, b], shape)
        }
    }
}

/// A random valid DAG over a `(1, 3, 16, 16)` input using every layer kind,
/// ending in a single 1x1 conv head with one anchor and one class.
pub fn random_dag(rng: &mut ChaCha8Rng, body_layers: usize) -> ModelGraph {
    let input = Shape::new(1, 3, 16, 16).unwrap();
    let mut b = DagBuilder {
        rng,
        layers: Vec::new(),
        weights: BTreeMap::new(),
        nodes: Vec::new(),
    };
    b.add(LayerParams::Input { channels: 3, height: 16, width: 16 }, &[], input);
    b.nodes[0].consumed = false;

    for _ in 0..body_layers {
        let n = b.nodes.len();
        // Prefer recent nodes so the graph has depth as well as width.
        let pick = n - 1 - b.rng.gen_range(0..n.min(4));
        let s = b.nodes[pick].shape;
        match b.rng.gen_range(0..7) {
            0 | 1 => {
                let k = [1, 3][b.rng.gen_range(0..2)];
                let stride = if s.h >= 4 && b.rng.gen_bool(0.25) { 2 } else { 1 };
                let out = b.rng.gen_range(1..9);
                let dw = k == 3 && b.rng.gen_bool(0.3);
                b.conv(pick, out, k, stride, dw);
            }
            2 => {
                let act = match b.rng.gen_range(0..4) {
                    0 => Activation::None,
                    1 => Activation::Relu,
                    2 => Activation::Relu6,
                    _ => Activation::LeakyRelu { slope: 0.1 },
                };
                b.add(LayerParams::Activate(act), &[pick], s);
            }
            3 if s.h >= 4 => {
                b.pool(pick);
            }
            4 if s.h <= 8 => {
                let shape = Shape::new(1, s.c, s.h * 2, s.w * 2).unwrap();
                b.add(LayerParams::Upsample { factor: 2 }, &[pick], shape);
            }
            _ => {
                let partners: Vec<usize> = (0..n)
                    .filter(|&j| j != pick && b.nodes[j].shape.h == s.h && b.nodes[j].shape.c + s.c <= 24)
                    .collect();
                if partners.is_empty() {
                    b.conv(pick, b.nodes[pick].shape.c.min(8), 3, 1, false);
                } else {
                    let other = partners[b.rng.gen_range(0..partners.len())];
                    b.merge(pick, other);
                }
            }
        }
    }

    // Fold every dangling output into one tail so nothing is left unconsumed.
    loop {
        let open: Vec<usize> = (1..b.nodes.len()).filter(|&i| !b.nodes[i].consumed).collect();
        if open.len() <= 1 {
            break;
        }
        let (mut x, mut y) = (open[0], open[1]);
        while b.nodes[x].shape.h > b.nodes[y].shape.h {
            x = b.pool(x);
        }
        while b.nodes[y].shape.h > b.nodes[x].shape.h {
            y = b.pool(y);
        }
        if b.nodes[x].shape.c + b.nodes[y].shape.c > 24 {
            x = b.conv(x, 4, 1, 1, false);
            y = b.conv(y, 4, 1, 1, false);
        }
        b.merge(x, y);
    }
    let tail = (1..b.nodes.len()).find(|&i| !b.nodes[i].consumed).unwrap_or(0);
    let head_node = b.conv(tail, 6, 1, 1, false);
    let grid = b.nodes[head_node].shape.h;
    let head = HeadConfig {
        scales: vec![HeadScale {
            layer: b.nodes[head_node].id,
            stride: 16 / grid,
            anchors: vec![(4.0, 6.0)],
        }],
        num_classes: 1,
        class_names: vec!["face".into()],
    };
    ModelGraph::new(b.layers, b.weights, head, BTreeMap::new())
}

pub fn assert_close(a: &Tensor, b: &Tensor, rel: f32, abs: f32, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        let tol = abs + rel * y.abs();
        assert!((x - y).abs() <= tol, "{what}: element {i}: {x} vs {y}");
    }
}
