use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use maskedge::detect::{average_precision, BBox, Detection, DetectionRecord, GroundTruthBox, DEFAULT_INPUT_SIZE};
use maskedge::exec::plan;
use maskedge::format::{convert_manifest, serialize_model, size_report, LayerParams, Manifest, ModelGraph, SizeReport};
use maskedge::reference::{reference_manifest, REFERENCE_SEED};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::input::{self, check_threshold};
use crate::{annotate, ModelArgs, UsageError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputKind {
    Json,
    Annotated,
}

#[derive(Args)]
pub struct DetectArgs {
    #[command(flatten)]
    model: ModelArgs,

    /// Confidence threshold (default: model metadata, else 0.30)
    #[arg(long)]
    conf: Option<f32>,

    /// NMS IoU threshold (default: model metadata, else 0.45)
    #[arg(long)]
    iou: Option<f32>,

    /// `json` prints detections; `annotated` also writes annotated PNG copies
    #[arg(long, value_enum, default_value_t = OutputKind::Json)]
    output: OutputKind,

    /// Directory for annotated images
    #[arg(long, required_if_eq("output", "annotated"))]
    out_dir: Option<PathBuf>,

    /// Input images (PNG or JPEG)
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

/// One image's results; also the per-line format `eval` reads.
#[derive(Serialize)]
struct ImageResult<'a> {
    image: String,
    width: usize,
    height: usize,
    detections: &'a [DetectionRecord],
    #[serde(skip_serializing_if = "Option::is_none")]
    annotated: Option<String>,
}

/// Writes one JSON line per image to stdout.
pub fn detect(args: DetectArgs, json: bool) -> Result<()> {
    let mut detector = input::detector(&args.model, args.conf, args.iou)?;
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for path in &args.images {
        let frame = input::load_image(path)?;
        let found = detector.detect(&frame)?;
        let head = &detector.graph().head;
        let records: Vec<DetectionRecord> = found.iter().map(|d| d.to_record(head)).collect();
        log::info!("{}: {} detections", path.display(), records.len());
        let annotated = match (args.output, &args.out_dir) {
            (OutputKind::Annotated, Some(dir)) => {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let target = dir.join(format!("{stem}.annotated.png"));
                annotate::write_annotated(&frame, &records, &target)?;
                Some(target.display().to_string())
            }
            _ => None,
        };
        let result = ImageResult {
            image: path.display().to_string(),
            width: frame.width(),
            height: frame.height(),
            detections: &records,
            annotated,
        };
        if json || args.output == OutputKind::Json {
            serde_json::to_writer(&mut out, &result)?;
            writeln!(out)?;
        } else {
            writeln!(out, "{}: {} detection(s)", result.image, records.len())?;
            for r in &records {
                writeln!(out, "  {:<8} {:.3} [{:.1}, {:.1}, {:.1}, {:.1}]", r.class, r.confidence, r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3])?;
            }
            if let Some(a) = &result.annotated {
                writeln!(out, "  wrote {a}")?;
            }
        }
    }
    Ok(())
}

#[derive(Args)]
pub struct ConvertArgs {
    /// JSON manifest; blobs are read relative to its directory
    manifest: PathBuf,

    /// Output model file
    #[arg(long, short)]
    output: PathBuf,
}

fn size_json(r: &SizeReport) -> serde_json::Value {
    json!({
        "total_bytes": r.total,
        "sections": {
            "header": r.header,
            "metadata": r.metadata,
            "graph": r.graph,
            "head": r.head,
            "weights": r.weight_section,
        },
        "raw_weight_bytes": r.weight_bytes,
        "overhead_ratio": r.overhead_ratio(),
    })
}

fn print_sizes(out: &mut impl Write, r: &SizeReport) -> Result<()> {
    writeln!(out, "total      {:>10} bytes", r.total)?;
    for (name, v) in [("header", r.header), ("metadata", r.metadata), ("graph", r.graph), ("head", r.head), ("weights", r.weight_section)] {
        writeln!(out, "  {name:<9}{v:>10}")?;
    }
    writeln!(out, "raw f32    {:>10} bytes (overhead {:.3}%)", r.weight_bytes, r.overhead_ratio() * 100.0)?;
    Ok(())
}

pub fn convert(args: ConvertArgs, json: bool) -> Result<()> {
    let text = fs::read_to_string(&args.manifest).with_context(|| format!("cannot read {}", args.manifest.display()))?;
    let manifest = Manifest::from_json(&text)?;
    let dir = args.manifest.parent().unwrap_or(Path::new("."));
    let mut blobs = HashMap::new();
    for (name, file) in manifest.blob_files() {
        let path = dir.join(&file);
        let bytes = fs::read(&path).with_context(|| format!("cannot read blob `{name}` from {}", path.display()))?;
        blobs.insert(name, bytes);
    }
    let graph = convert_manifest(&text, &blobs)?;
    let bytes = serialize_model(&graph)?;
    fs::write(&args.output, &bytes).with_context(|| format!("cannot write {}", args.output.display()))?;
    let report = size_report(&graph)?;
    let mut out = std::io::stdout().lock();
    if json {
        let mut v = size_json(&report);
        v["output"] = json!(args.output.display().to_string());
        v["layers"] = json!(graph.layers.len());
        v["parameters"] = json!(graph.parameter_count());
        writeln!(out, "{v}")?;
    } else {
        writeln!(out, "wrote {} ({} layers, {} parameters)", args.output.display(), graph.layers.len(), graph.parameter_count())?;
        print_sizes(&mut out, &report)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Detections as JSON lines: `{"image": id, "detections": [{"class_id", "confidence", "box"}]}`
    #[arg(long)]
    detections: PathBuf,

    /// Ground truth as JSON lines: `{"image": id, "boxes": [{"class_id", "box"}]}`
    #[arg(long)]
    truth: PathBuf,

    /// IoU needed for a match
    #[arg(long, default_value_t = 0.5)]
    iou: f32,
}

#[derive(Deserialize)]
struct TruthBox {
    class_id: usize,
    #[serde(default)]
    class: Option<String>,
    #[serde(rename = "box")]
    bbox: [f32; 4],
}

#[derive(Deserialize)]
struct TruthLine {
    image: String,
    boxes: Vec<TruthBox>,
}

#[derive(Deserialize)]
struct DetectedBox {
    class_id: usize,
    #[serde(default)]
    class: Option<String>,
    confidence: f32,
    #[serde(rename = "box")]
    bbox: [f32; 4],
}

#[derive(Deserialize)]
struct DetectionLine {
    image: String,
    detections: Vec<DetectedBox>,
}

/// Reads non-blank JSON lines, naming the file and line number on any error.
fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = fs::File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        rows.push((i + 1, row));
    }
    Ok(rows)
}

fn checked_box(b: [f32; 4], path: &Path, line: usize) -> Result<BBox> {
    let bbox = BBox::new(b[0], b[1], b[2], b[3]);
    if !b.iter().all(|v| v.is_finite()) || !bbox.is_valid() {
        bail!("{}: line {line}: box {b:?} must be finite with x1 < x2 and y1 < y2", path.display());
    }
    Ok(bbox)
}

pub fn eval(args: EvalArgs, json: bool) -> Result<()> {
    let iou = check_threshold("iou", args.iou)?;
    let truth_rows: Vec<(usize, TruthLine)> = read_lines(&args.truth)?;
    let det_rows: Vec<(usize, DetectionLine)> = read_lines(&args.detections)?;

    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut truth = Vec::with_capacity(truth_rows.len());
    for (line, row) in truth_rows {
        if index.insert(row.image.clone(), truth.len()).is_some() {
            bail!("{}: line {line}: duplicate image `{}`", args.truth.display(), row.image);
        }
        let mut boxes = Vec::with_capacity(row.boxes.len());
        for b in row.boxes {
            if let Some(n) = b.class {
                names.entry(b.class_id).or_insert(n);
            }
            boxes.push(GroundTruthBox { class_id: b.class_id, bbox: checked_box(b.bbox, &args.truth, line)? });
        }
        truth.push(boxes);
    }
    let mut detections: Vec<Vec<Detection>> = vec![Vec::new(); truth.len()];
    let mut seen = HashSet::new();
    for (line, row) in det_rows {
        let Some(&i) = index.get(&row.image) else {
            bail!("{}: line {line}: image `{}` has no ground-truth line", args.detections.display(), row.image);
        };
        if !seen.insert(i) {
            bail!("{}: line {line}: duplicate image `{}`", args.detections.display(), row.image);
        }
        for d in row.detections {
            if !(0.0..=1.0).contains(&d.confidence) {
                bail!("{}: line {line}: confidence {} outside [0, 1]", args.detections.display(), d.confidence);
            }
            if let Some(n) = d.class {
                names.entry(d.class_id).or_insert(n);
            }
            detections[i].push(Detection {
                class_id: d.class_id,
                confidence: d.confidence,
                bbox: checked_box(d.bbox, &args.detections, line)?,
            });
        }
    }

    let report = average_precision(&detections, &truth, iou);
    let name = |c: &usize| names.get(c).cloned().unwrap_or_else(|| c.to_string());
    let mut out = std::io::stdout().lock();
    if json {
        let per_class: Vec<_> = report
            .per_class
            .iter()
            .map(|(c, ap)| json!({"class_id": c, "class": name(c), "ap": ap}))
            .collect();
        let v = json!({"images": truth.len(), "iou_threshold": iou, "per_class": per_class, "map": report.map});
        writeln!(out, "{v}")?;
    } else {
        writeln!(out, "{} images, IoU >= {iou}", truth.len())?;
        for (c, ap) in &report.per_class {
            writeln!(out, "  AP {:<10} {ap:.6}", name(c))?;
        }
        writeln!(out, "mAP {:.6}", report.map)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct InspectArgs {
    /// Model file (.mef)
    #[arg(long, short)]
    model: PathBuf,
}

fn describe(params: &LayerParams) -> String {
    match params {
        LayerParams::Input { channels, height, width } => format!("{channels}x{height}x{width}"),
        LayerParams::Conv(p) => {
            let mut s = format!(
                "k{}x{} s{}x{} p{}x{}",
                p.kernel.0, p.kernel.1, p.stride.0, p.stride.1, p.padding.0, p.padding.1
            );
            if p.groups > 1 {
                s.push_str(&format!(" g{}", p.groups));
            }
            if !p.has_bias {
                s.push_str(" nobias");
            }
            s
        }
        LayerParams::Activate(a) => a.name().to_string(),
        LayerParams::MaxPool { kernel, stride } => format!("k{}x{} s{}x{}", kernel.0, kernel.1, stride.0, stride.1),
        LayerParams::Upsample { factor } => format!("x{factor}"),
        LayerParams::Concat | LayerParams::Add => String::new(),
    }
}

fn inspect_graph(graph: &ModelGraph, json: bool, out: &mut impl Write) -> Result<()> {
    let p = plan(graph, graph.input_shape().context("model has no input layer")?)?;
    let report = size_report(graph)?;
    if json {
        let layers: Vec<_> = graph
            .layers
            .iter()
            .zip(&p.shapes)
            .map(|(l, s)| {
                json!({
                    "id": l.id,
                    "kind": l.kind().name(),
                    "inputs": l.inputs,
                    "output_shape": [s.n, s.c, s.h, s.w],
                    "parameters": graph.weights.get(&l.id).map_or(0, Vec::len),
                    "params": describe(&l.params),
                })
            })
            .collect();
        let scales: Vec<_> = graph
            .head
            .scales
            .iter()
            .map(|s| json!({"layer": s.layer, "stride": s.stride, "anchors": s.anchors}))
            .collect();
        let v = json!({
            "version": graph.version,
            "layers": layers,
            "head": {"num_classes": graph.head.num_classes, "class_names": graph.head.class_names, "scales": scales},
            "metadata": graph.metadata,
            "parameters": graph.parameter_count(),
            "size": size_json(&report),
            "arena": {"bytes": p.arena_size, "slots": p.slot_count(), "no_reuse_bytes": p.no_reuse_size()},
        });
        writeln!(out, "{v}")?;
        return Ok(());
    }
    writeln!(out, "{:>4}  {:<9} {:<12} {:<20} {:>8}  params", "id", "kind", "inputs", "output", "weights")?;
    for (l, s) in graph.layers.iter().zip(&p.shapes) {
        let inputs: Vec<String> = l.inputs.iter().map(u32::to_string).collect();
        writeln!(
            out,
            "{:>4}  {:<9} {:<12} {:<20} {:>8}  {}",
            l.id,
            l.kind().name(),
            inputs.join(","),
            s.to_string(),
            graph.weights.get(&l.id).map_or(0, Vec::len),
            describe(&l.params)
        )?;
    }
    writeln!(out, "head: {} classes {:?}", graph.head.num_classes, graph.head.class_names)?;
    for s in &graph.head.scales {
        writeln!(out, "  layer {} stride {} anchors {:?}", s.layer, s.stride, s.anchors)?;
    }
    for (k, v) in &graph.metadata {
        writeln!(out, "meta {k} = {v}")?;
    }
    writeln!(out, "parameters {}", graph.parameter_count())?;
    print_sizes(out, &report)?;
    writeln!(
        out,
        "arena      {:>10} bytes in {} slots (no reuse: {} bytes)",
        p.arena_size,
        p.slot_count(),
        p.no_reuse_size()
    )?;
    Ok(())
}

pub fn inspect(args: InspectArgs, json: bool) -> Result<()> {
    let graph = input::load_model(&args.model)?;
    inspect_graph(&graph, json, &mut std::io::stdout().lock())
}

#[derive(Args)]
pub struct ReferenceArgs {
    /// Directory for `manifest.json` and its `.bin` blobs
    #[arg(long)]
    out_dir: Option<PathBuf>,

    /// Also write the converted model file
    #[arg(long, short)]
    output: Option<PathBuf>,

    /// Weight seed
    #[arg(long, default_value_t = REFERENCE_SEED)]
    seed: u64,

    /// Square input size; must be a multiple of 32
    #[arg(long, default_value_t = DEFAULT_INPUT_SIZE)]
    size: usize,
}

pub fn reference(args: ReferenceArgs, json: bool) -> Result<()> {
    if args.out_dir.is_none() && args.output.is_none() {
        return Err(UsageError("give --out-dir, --output or both".into()).into());
    }
    if args.size < 32 || args.size % 32 != 0 {
        return Err(UsageError(format!("--size {} must be a positive multiple of 32", args.size)).into());
    }
    let reference = reference_manifest(args.seed, args.size);
    let mut written = Vec::new();
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let manifest_path = dir.join("manifest.json");
        fs::write(&manifest_path, &reference.json)?;
        for (name, file) in Manifest::from_json(&reference.json)?.blob_files() {
            fs::write(dir.join(file), &reference.blobs[&name])?;
        }
        written.push(manifest_path.display().to_string());
    }
    if let Some(path) = &args.output {
        let graph = reference.convert()?;
        fs::write(path, serialize_model(&graph)?).with_context(|| format!("cannot write {}", path.display()))?;
        written.push(path.display().to_string());
    }
    let mut out = std::io::stdout().lock();
    if json {
        writeln!(out, "{}", json!({"seed": args.seed, "size": args.size, "written": written}))?;
    } else {
        for w in written {
            writeln!(out, "wrote {w}")?;
        }
    }
    Ok(())
}
