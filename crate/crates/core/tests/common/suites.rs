//! Randomized checks shared by the focused test files and the acceptance run.
//! Each returns a one-line summary on success and the first failure otherwise.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use maskedge::detect::{
    average_precision, decode_head, nms, BBox, DetectConfig, Detection, Detector, GroundTruthBox,
    ImageFrame, RawDetection,
};
use maskedge::exec::{execute, execute_without_reuse, plan};
use maskedge::format::{
    parse_model, serialize_model, size_report, HeadConfig, HeadScale, LayerDesc, LayerParams,
    ModelGraph,
};
use maskedge::ops::{self, Activation, ConvParams, KernelPath};
use maskedge::tensor::{Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub const OP_REL_TOL: f32 = 1e-5;
pub const OP_ABS_TOL: f32 = 1e-6;
pub const EXEC_REL_TOL: f32 = 1e-6;
pub const PATHS: [KernelPath; 2] = [KernelPath::Reference, KernelPath::Optimized];

fn close(a: &Tensor, b: &Tensor, rel: f32, abs: f32) -> Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("shape {} vs {}", a.shape(), b.shape()));
    }
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if (x - y).abs() > abs + rel * y.abs() {
            return Err(format!("element {i}: {x} vs oracle {y}"));
        }
    }
    Ok(())
}

fn random_conv_case(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Option<Vec<f32>>, ConvParams) {
    let depthwise = rng.gen_bool(0.2);
    let groups = if depthwise { rng.gen_range(1..7) } else { rng.gen_range(1..4) };
    let cin = if depthwise { groups } else { groups * rng.gen_range(1..4) };
    let cout = if depthwise { groups } else { groups * rng.gen_range(1..4) };
    let kernel: (usize, usize) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let padding = (rng.gen_range(0..kernel.0), rng.gen_range(0..kernel.1));
    let h = rng.gen_range(1..10).max(kernel.0.saturating_sub(2 * padding.0));
    let w = rng.gen_range(1..10).max(kernel.1.saturating_sub(2 * padding.1));
    let params = ConvParams {
        out_channels: cout,
        kernel,
        stride: (rng.gen_range(1..4), rng.gen_range(1..4)),
        padding,
        groups,
        has_bias: rng.gen_bool(0.7),
    };
    let shape = Shape::new(rng.gen_range(1..3), cin, h, w).unwrap();
    let input = random_tensor(rng, shape, 2.0);
    let (o, i, kh, kw) = params.weight_shape(cin);
    let weights = random_tensor(rng, Shape::new(o, i, kh, kw).unwrap(), 1.0);
    let bias = params
        .has_bias
        .then(|| (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect());
    (input, weights, bias, params)
}

fn random_small(rng: &mut ChaCha8Rng, scale: f32) -> Tensor {
    let shape = Shape::new(rng.gen_range(1..3), rng.gen_range(1..6), rng.gen_range(1..10), rng.gen_range(1..10)).unwrap();
    random_tensor(rng, shape, scale)
}

/// Every operator against its naive oracle on `cases` random inputs per
/// operator and kernel path.
pub fn operator_oracles(seed: u64, cases: usize) -> Result<String, String> {
    let started = Instant::now();
    let mut rng = rng(seed);
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for case in 0..cases {
        let (input, weights, bias, params) = random_conv_case(&mut rng);
        let expected = naive_conv(&input, weights.data(), bias.as_deref(), &params);
        for path in PATHS {
            let got = ops::conv2d_with(&input, &weights, bias.as_deref(), &params, path)
                .map_err(|e| format!("conv case {case}: {e}"))?;
            close(&got, &expected, OP_REL_TOL, OP_ABS_TOL)
                .map_err(|e| format!("conv case {case} {params:?} {path:?}: {e}"))?;
        }
        *counts.entry("conv2d").or_default() += 1;

        let x = random_small(&mut rng, 8.0);
        let act = match case % 4 {
            0 => Activation::None,
            1 => Activation::Relu,
            2 => Activation::Relu6,
            _ => Activation::LeakyRelu { slope: rng.gen_range(0.01..0.99) },
        };
        let expected = Tensor::from_vec(x.shape(), x.data().iter().map(|&v| naive_activation(v, act)).collect()).unwrap();
        let got = ops::activate(&x, act).map_err(|e| e.to_string())?;
        close(&got, &expected, OP_REL_TOL, OP_ABS_TOL).map_err(|e| format!("activate case {case} {act:?}: {e}"))?;
        *counts.entry("activate").or_default() += 1;

        let x = random_small(&mut rng, 4.0);
        let s = x.shape();
        let kernel = (rng.gen_range(1..=s.h.min(4)), rng.gen_range(1..=s.w.min(4)));
        let stride = (rng.gen_range(1..4), rng.gen_range(1..4));
        let expected = naive_max_pool(&x, kernel, stride);
        for path in PATHS {
            let got = ops::max_pool_with(&x, kernel, stride, path).map_err(|e| e.to_string())?;
            close(&got, &expected, OP_REL_TOL, OP_ABS_TOL)
                .map_err(|e| format!("max_pool case {case} k{kernel:?} s{stride:?} {path:?}: {e}"))?;
        }
        *counts.entry("max_pool").or_default() += 1;

        let x = random_small(&mut rng, 4.0);
        let factor = rng.gen_range(1..4);
        let got = ops::upsample_nearest(&x, factor).map_err(|e| e.to_string())?;
        close(&got, &naive_upsample(&x, factor), OP_REL_TOL, OP_ABS_TOL)
            .map_err(|e| format!("upsample case {case}: {e}"))?;
        *counts.entry("upsample").or_default() += 1;

        let a = random_small(&mut rng, 4.0);
        let sa = a.shape();
        let sb = Shape::new(sa.n, rng.gen_range(1..6), sa.h, sa.w).unwrap();
        let b = random_tensor(&mut rng, sb, 4.0);
        let got = ops::concat_channels(&a, &b).map_err(|e| e.to_string())?;
        close(&got, &naive_concat(&a, &b), OP_REL_TOL, OP_ABS_TOL).map_err(|e| format!("concat case {case}: {e}"))?;
        *counts.entry("concat").or_default() += 1;

        let b = random_tensor(&mut rng, sa, 4.0);
        let got = ops::add(&a, &b).map_err(|e| e.to_string())?;
        close(&got, &naive_add(&a, &b), OP_REL_TOL, OP_ABS_TOL).map_err(|e| format!("add case {case}: {e}"))?;
        *counts.entry("add").or_default() += 1;
    }
    let elapsed = started.elapsed();
    if elapsed > Duration::from_secs(60) {
        return Err(format!("took {elapsed:?}, limit 60 s"));
    }
    let list: Vec<String> = counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    Ok(format!("{} in {:.2} s", list.join(" "), elapsed.as_secs_f64()))
}

fn random_candidates(rng: &mut ChaCha8Rng) -> Vec<RawDetection> {
    let n = rng.gen_range(0..60);
    // A few cluster centers so overlaps are common; quantized scores force ties.
    let centers: Vec<(f32, f32)> = (0..rng.gen_range(1..6))
        .map(|_| (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)))
        .collect();
    (0..n)
        .map(|_| {
            let (cx, cy) = centers[rng.gen_range(0..centers.len())];
            let bbox = BBox::from_center(
                cx + rng.gen_range(-8.0..8.0),
                cy + rng.gen_range(-8.0..8.0),
                rng.gen_range(4.0..40.0),
                rng.gen_range(4.0..40.0),
            );
            RawDetection {
                class_id: rng.gen_range(0..3),
                confidence: rng.gen_range(1..21) as f32 / 20.0,
                bbox,
            }
        })
        .collect()
}

pub fn nms_equivalence(seed: u64, sets: usize) -> Result<String, String> {
    let mut rng = rng(seed);
    let mut total = 0;
    for set in 0..sets {
        let candidates = random_candidates(&mut rng);
        let thr = rng.gen_range(0.1..0.9);
        let got = nms(&candidates, thr);
        let expected = brute_force_nms(&candidates, thr);
        if got != expected {
            return Err(format!("set {set} ({} candidates, iou {thr}): {} kept vs oracle {}", candidates.len(), got.len(), expected.len()));
        }
        total += candidates.len();
    }
    Ok(format!("{sets} sets, {total} candidates, identical"))
}

fn sort_key(d: &RawDetection) -> (usize, u32, [u32; 4]) {
    (d.class_id, d.confidence.to_bits(), d.bbox.to_array().map(f32::to_bits))
}

pub fn decode_equivalence(seed: u64, tensors: usize) -> Result<String, String> {
    let mut rng = rng(seed);
    let mut emitted = 0;
    for case in 0..tensors {
        let classes = rng.gen_range(1..4);
        let anchors: Vec<(f32, f32)> = (0..rng.gen_range(1..4))
            .map(|_| (rng.gen_range(4.0..200.0), rng.gen_range(4.0..200.0)))
            .collect();
        let stride = [8, 16, 32][rng.gen_range(0..3)];
        let head = HeadConfig {
            scales: vec![HeadScale { layer: 1, stride, anchors: anchors.clone() }],
            num_classes: classes,
            class_names: (0..classes).map(|c| format!("c{c}")).collect(),
        };
        let shape = Shape::new(1, anchors.len() * (5 + classes), rng.gen_range(1..12), rng.gen_range(1..12)).unwrap();
        let t = random_tensor(&mut rng, shape, 8.0);
        let conf = rng.gen_range(0.05..0.9);
        let mut got = decode_head(&t, 0, &head, conf).map_err(|e| e.to_string())?;
        let mut expected = naive_decode(&t, &head.scales[0], classes, conf);
        got.sort_by_key(sort_key);
        expected.sort_by_key(sort_key);
        if got != expected {
            return Err(format!("tensor {case}: {} candidates vs oracle {}", got.len(), expected.len()));
        }
        emitted += got.len();
    }
    Ok(format!("{tensors} head tensors, {emitted} candidates, identical"))
}

/// Arena execution against fresh-buffer execution on random DAGs.
pub fn executor_equivalence(seed: u64, graphs: usize) -> Result<String, String> {
    let mut rng = rng(seed);
    let (mut arena, mut naive) = (0usize, 0usize);
    for g in 0..graphs {
        let body = rng.gen_range(3..25);
        let graph = random_dag(&mut rng, body);
        let input_shape = graph.input_shape().unwrap();
        let p = plan(&graph, input_shape).map_err(|e| format!("graph {g}: {e}"))?;
        if p.arena_size > p.no_reuse_size() {
            return Err(format!("graph {g}: arena {} > no-reuse {}", p.arena_size, p.no_reuse_size()));
        }
        arena += p.arena_size;
        naive += p.no_reuse_size();
        let input = random_tensor(&mut rng, input_shape, 1.0);
        for path in PATHS {
            let (got, _) = execute(&graph, &p, &input, false, path).map_err(|e| format!("graph {g}: {e}"))?;
            let expected = execute_without_reuse(&graph, &input, path).map_err(|e| format!("graph {g}: {e}"))?;
            if got.len() != expected.len() {
                return Err(format!("graph {g}: output count"));
            }
            for (a, b) in got.iter().zip(&expected) {
                close(a, b, EXEC_REL_TOL, 0.0).map_err(|e| format!("graph {g} {path:?}: {e}"))?;
            }
        }
    }
    Ok(format!(
        "{graphs} DAGs identical; arena {:.1}% of no-reuse bytes in total",
        100.0 * arena as f64 / naive as f64
    ))
}

pub fn round_trip(seed: u64, graphs: usize) -> Result<String, String> {
    let mut rng = rng(seed);
    for g in 0..graphs {
        let body = rng.gen_range(1..30);
        let graph = random_dag(&mut rng, body);
        let bytes = serialize_model(&graph).map_err(|e| format!("graph {g}: {e}"))?;
        let parsed = parse_model(&bytes).map_err(|e| format!("graph {g}: {e}"))?;
        if !parsed.bitwise_eq(&graph) {
            return Err(format!("graph {g}: parsed graph differs"));
        }
        if serialize_model(&parsed).map_err(|e| e.to_string())? != bytes {
            return Err(format!("graph {g}: re-serialized bytes differ"));
        }
    }
    Ok(format!("{graphs} graphs bitwise identical"))
}

fn mutate(rng: &mut ChaCha8Rng, base: &[u8]) -> Vec<u8> {
    let mut b = base.to_vec();
    for _ in 0..rng.gen_range(1..4) {
        if b.is_empty() {
            b.push(rng.gen());
            continue;
        }
        let at = rng.gen_range(0..b.len());
        match rng.gen_range(0..7) {
            0 => b[at] ^= 1 << rng.gen_range(0..8),
            1 => b[at] = rng.gen(),
            2 => b.truncate(at),
            3 => {
                let n = rng.gen_range(1..16);
                let junk: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
                b.splice(at..at, junk);
            }
            4 => {
                let end = (at + rng.gen_range(1..32)).min(b.len());
                b.drain(at..end);
            }
            5 => {
                let v: u32 = [u32::MAX, 1 << 28, (1 << 28) + 1, 0, 0x7fff_ffff][rng.gen_range(0..5)];
                for (k, byte) in v.to_le_bytes().iter().enumerate() {
                    if let Some(slot) = b.get_mut(at + k) {
                        *slot = *byte;
                    }
                }
            }
            _ => {
                let end = (at + rng.gen_range(1..64)).min(b.len());
                let chunk = b[at..end].to_vec();
                b.splice(at..at, chunk);
            }
        }
    }
    b
}

/// Mutation fuzz over a valid file: no panics, no slow cases, every error
/// carries an in-range offset, and accepted mutants execute without panicking.
pub fn mutation_fuzz(seed: u64, cases: usize) -> Result<String, String> {
    let mut rng = rng(seed);
    let graph = random_dag(&mut rng, 20);
    let base = serialize_model(&graph).map_err(|e| e.to_string())?;
    let (mut rejected, mut accepted, mut executed) = (0, 0, 0);
    let mut slowest = Duration::ZERO;
    for case in 0..cases {
        let bytes = mutate(&mut rng, &base);
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let parsed = parse_model(&bytes);
            // Mutated dimensions can be legal yet huge; only run modest plans.
            let ran = parsed.as_ref().ok().and_then(|g| {
                let shape = g.input_shape()?;
                let p = plan(g, shape).ok()?;
                if p.arena_size > 64 << 20 || shape.len() > 1 << 20 {
                    return None;
                }
                let input = Tensor::full(shape, 0.5).ok()?;
                Some(execute(g, &p, &input, false, KernelPath::Optimized).is_ok())
            });
            (parsed.err(), ran)
        }));
        let took = started.elapsed();
        slowest = slowest.max(took);
        if took > Duration::from_secs(2) {
            return Err(format!("case {case}: took {took:?}"));
        }
        match outcome {
            Err(_) => return Err(format!("case {case}: panicked")),
            Ok((Some(err), _)) => {
                if err.offset > bytes.len() {
                    return Err(format!("case {case}: offset {} beyond {} bytes", err.offset, bytes.len()));
                }
                if !err.to_string().contains("offset") {
                    return Err(format!("case {case}: message lacks offset: {err}"));
                }
                rejected += 1;
            }
            Ok((None, ran)) => {
                accepted += 1;
                if ran == Some(true) {
                    executed += 1;
                }
            }
        }
    }
    Ok(format!(
        "{cases} mutants of a {}-byte file: {rejected} rejected with offsets, {accepted} accepted ({executed} executed cleanly), 0 panics, slowest {:.1} ms",
        base.len(),
        slowest.as_secs_f64() * 1e3
    ))
}

/// Truncating a valid file at every byte must fail with an offset.
pub fn truncation_sweep(graph: &ModelGraph) -> Result<usize, String> {
    let bytes = serialize_model(graph).map_err(|e| e.to_string())?;
    for len in 0..bytes.len() {
        match catch_unwind(|| parse_model(&bytes[..len])) {
            Err(_) => return Err(format!("panic at length {len}")),
            Ok(Ok(_)) => return Err(format!("prefix of length {len} parsed")),
            Ok(Err(e)) if e.offset > len => return Err(format!("offset {} beyond length {len}", e.offset)),
            Ok(Err(_)) => {}
        }
    }
    Ok(bytes.len())
}

pub fn det(class_id: usize, confidence: f32, b: [f32; 4]) -> Detection {
    Detection { class_id, confidence, bbox: BBox::new(b[0], b[1], b[2], b[3]) }
}

pub fn gt(class_id: usize, b: [f32; 4]) -> GroundTruthBox {
    GroundTruthBox { class_id, bbox: BBox::new(b[0], b[1], b[2], b[3]) }
}

/// Three images, two classes. Class 0 has four boxes; ranked by confidence its
/// detections are TP, TP, FP (duplicate), FP (no overlap), TP, so the precision
/// envelope is 1.0 up to recall 0.5 and 0.6 up to recall 0.75, giving
/// (51 * 1.0 + 25 * 0.6) / 101 = 66/101. Class 1 has one box, found only after
/// one false positive: precision 0.5 at every recall level, AP 0.5.
pub fn ap_fixture() -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruthBox>>) {
    let truth = vec![
        vec![gt(0, [0.0, 0.0, 10.0, 10.0]), gt(0, [20.0, 20.0, 30.0, 30.0]), gt(1, [40.0, 40.0, 50.0, 50.0])],
        vec![gt(0, [0.0, 0.0, 10.0, 10.0])],
        vec![gt(0, [5.0, 5.0, 15.0, 15.0])],
    ];
    let dets = vec![
        vec![det(0, 0.9, [0.0, 0.0, 10.0, 10.0]), det(0, 0.6, [50.0, 50.0, 60.0, 60.0]), det(1, 0.3, [40.0, 40.0, 50.0, 50.0])],
        vec![det(0, 0.8, [0.0, 0.0, 10.0, 9.0]), det(0, 0.7, [0.0, 0.0, 10.0, 10.0])],
        vec![det(0, 0.5, [5.0, 5.0, 15.0, 15.0]), det(1, 0.95, [0.0, 0.0, 5.0, 5.0])],
    ];
    (dets, truth)
}

pub const AP_FIXTURE_CLASS0: f64 = 66.0 / 101.0;
pub const AP_FIXTURE_CLASS1: f64 = 0.5;

pub fn metric_fixtures() -> Result<String, String> {
    let (dets, truth) = ap_fixture();
    let r = average_precision(&dets, &truth, 0.5);
    let expected_map = (AP_FIXTURE_CLASS0 + AP_FIXTURE_CLASS1) / 2.0;
    if (r.per_class[&0] - AP_FIXTURE_CLASS0).abs() > 1e-12
        || (r.per_class[&1] - AP_FIXTURE_CLASS1).abs() > 1e-12
        || (r.map - expected_map).abs() > 1e-12
    {
        return Err(format!("fixture gave {:?}, expected 66/101, 0.5, mAP {expected_map}", r));
    }
    let perfect: Vec<Vec<Detection>> = truth
        .iter()
        .map(|img| img.iter().map(|g| Detection { class_id: g.class_id, confidence: 0.9, bbox: g.bbox }).collect())
        .collect();
    let p = average_precision(&perfect, &truth, 0.5).map;
    if p != 1.0 {
        return Err(format!("perfect detector mAP {p}"));
    }
    let e = average_precision(&vec![Vec::new(); truth.len()], &truth, 0.5).map;
    if e != 0.0 {
        return Err(format!("empty detector mAP {e}"));
    }
    Ok(format!("fixture mAP {:.6} (exact), perfect 1.0, empty 0.0", r.map))
}

/// One strided conv whose receptive fields are exactly the 16x16 grid cells
/// of a 64x64 input. Objectness and class 1 sum the cell's RGB values with
/// weight 40/768 and bias -20: an all-white cell gives logit +20, an all-black
/// one -20. Box offsets are all zero and class 0 stays at -20.
pub fn synthetic_model() -> ModelGraph {
    let per_anchor = 7;
    let params = ConvParams::new(per_anchor, 16, 16, 0);
    let fan = 3 * 16 * 16;
    let mut weights = vec![0.0f32; per_anchor * fan];
    for ch in [4, 6] {
        weights[ch * fan..(ch + 1) * fan].fill(40.0 / fan as f32);
    }
    let bias = [0.0, 0.0, 0.0, 0.0, -20.0, -20.0, -20.0];
    weights.extend(bias);
    let layers = vec![
        LayerDesc::new(0, LayerParams::Input { channels: 3, height: 64, width: 64 }, vec![]),
        LayerDesc::new(1, LayerParams::Conv(params), vec![0]),
    ];
    let head = HeadConfig {
        scales: vec![HeadScale { layer: 1, stride: 16, anchors: vec![(20.0, 28.0)] }],
        num_classes: 2,
        class_names: vec!["mask".into(), "no_mask".into()],
    };
    ModelGraph::new(layers, BTreeMap::from([(1, weights)]), head, BTreeMap::new())
}

/// 128x96 black frame with a white block at x [64, 96), y [16, 48).
///
/// Letterboxing to 64x64 gives scale 0.5 and a vertical pad of 8, so the block
/// lands on net pixels x [32, 48), y [16, 32): exactly cell (2, 1). Decoding
/// gives center ((0.5 + 2) * 16, (0.5 + 1) * 16) = (40, 24) and size 20x28,
/// i.e. net box (30, 10, 50, 38), which maps back to (60, 4, 100, 60).
pub fn synthetic_frame() -> ImageFrame {
    let mut frame = ImageFrame::filled(128, 96, [0, 0, 0]).unwrap();
    for y in 16..48 {
        for x in 64..96 {
            frame.set_pixel(x, y, [255, 255, 255]);
        }
    }
    frame
}

pub const SYNTHETIC_BOX: [f32; 4] = [60.0, 4.0, 100.0, 60.0];

pub fn synthetic_end_to_end() -> Result<String, String> {
    let graph = synthetic_model();
    let bytes = serialize_model(&graph).map_err(|e| e.to_string())?;
    let graph = parse_model(&bytes).map_err(|e| e.to_string())?;
    let mut results = Vec::new();
    for path in PATHS {
        let mut detector = Detector::new(Arc::new(graph.clone()), DetectConfig::default(), path).map_err(|e| e.to_string())?;
        let found = detector.detect(&synthetic_frame()).map_err(|e| e.to_string())?;
        if found.len() != 1 {
            return Err(format!("{path:?}: {} detections, expected exactly 1: {found:?}", found.len()));
        }
        let d = found[0];
        let err = d.bbox.to_array().iter().zip(SYNTHETIC_BOX).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        if d.class_id != 1 || err > 1.0 || d.confidence < 0.99 {
            return Err(format!("{path:?}: got {d:?}, expected class 1 at {SYNTHETIC_BOX:?}"));
        }
        results.push(err);
    }
    Ok(format!(
        "1 detection, class 1, box within {:.3} px of {SYNTHETIC_BOX:?} on both kernel paths",
        results.iter().copied().fold(0.0f32, f32::max)
    ))
}

pub fn size_within(graph: &ModelGraph) -> Result<(u64, f64), String> {
    let r = size_report(graph).map_err(|e| e.to_string())?;
    Ok((r.total, r.overhead_ratio()))
}
