use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use maskedge::detect::{DetectConfig, Detector};
use maskedge::exec::{write_profile_jsonl, LayerProfile};
use maskedge::ops::KernelPath;
use maskedge::reference::{reference_model, REFERENCE_SEED};
use maskedge::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{input, KernelArg, UsageError};

#[derive(Args)]
pub struct BenchArgs {
    /// Model file (.mef); omit to benchmark the built-in seeded reference model
    #[arg(long, short)]
    model: Option<PathBuf>,

    /// Network input size, `N` or `WxH`
    #[arg(long, value_parser = input::parse_size)]
    size: Option<(usize, usize)>,

    /// Kernel implementation
    #[arg(long, value_enum, default_value_t = KernelArg::Optimized)]
    kernel: KernelArg,

    /// Timed frames
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    iterations: u32,

    /// Untimed frames run first
    #[arg(long, default_value_t = 5)]
    warmup: u32,

    /// Seed for the random input tensor
    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Also measure throughput with this many parallel workers
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,

    /// Also time the other kernel path and report the optimized/reference speedup
    #[arg(long)]
    compare: bool,

    /// Write the last timed frame's per-layer profile as JSON lines
    #[arg(long)]
    profile_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct LayerTiming {
    layer: u32,
    kind: &'static str,
    total_ms: f64,
    mean_us: f64,
}

#[derive(Serialize)]
struct Overhead {
    profiled_total_ms: f64,
    plain_total_ms: f64,
    /// `profiled / plain - 1`.
    relative: f64,
}

#[derive(Serialize)]
struct Comparison {
    optimized_ms_per_frame: f64,
    reference_ms_per_frame: f64,
    /// Reference time over optimized time.
    speedup: f64,
}

#[derive(Serialize)]
struct Throughput {
    threads: u32,
    frames: u64,
    wall_ms: f64,
    fps: f64,
}

#[derive(Serialize)]
pub struct BenchReport {
    model: String,
    input_size: [usize; 2],
    kernel: &'static str,
    seed: u64,
    warmup: u32,
    frames_processed: u64,
    total_ms: f64,
    fps: f64,
    mean_frame_ms: f64,
    median_frame_ms: f64,
    min_frame_ms: f64,
    max_frame_ms: f64,
    per_layer: Vec<LayerTiming>,
    per_kind_ms: BTreeMap<&'static str, f64>,
    peak_arena_bytes: usize,
    no_reuse_bytes: usize,
    profiling_overhead: Overhead,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<Comparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    throughput: Option<Throughput>,
    excludes: &'static str,
}

/// Wall time of `frames` unprofiled inferences, in milliseconds.
fn plain_run(detector: &mut Detector, input: &Tensor, frames: u32) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..frames {
        detector.infer(input, false)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

pub fn run(args: BenchArgs, json: bool) -> Result<()> {
    let (graph, model_name) = match &args.model {
        Some(path) => (input::load_model(path)?, path.display().to_string()),
        None => (reference_model(REFERENCE_SEED, 320), format!("reference(seed={REFERENCE_SEED})")),
    };
    let graph = Arc::new(graph);
    let kernel: KernelPath = args.kernel.into();
    let mut detector = match args.size {
        Some(size) => Detector::with_input_size(graph, DetectConfig::default(), kernel, size),
        None => Detector::new(graph, DetectConfig::default(), kernel),
    }
    .context("cannot prepare the model for inference")?;
    let (w, h) = detector.input_size();
    let channels = detector.context().plan().input_shape().c;
    if args.threads as usize > 256 {
        return Err(UsageError("--threads must be at most 256".into()).into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let shape = Shape::new(1, channels, h, w)?;
    let input = Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen::<f32>()).collect())?;

    for _ in 0..args.warmup {
        detector.infer(&input, false)?;
    }
    let mut frame_ms = Vec::with_capacity(args.iterations as usize);
    let mut layer_totals: Vec<(u32, &'static str, f64)> = Vec::new();
    let mut last_profile: Vec<LayerProfile> = Vec::new();
    let start = Instant::now();
    for _ in 0..args.iterations {
        let t = Instant::now();
        let (_, profile) = detector.infer(&input, true)?;
        frame_ms.push(t.elapsed().as_secs_f64() * 1e3);
        if layer_totals.is_empty() {
            layer_totals = profile.iter().map(|p| (p.layer, p.kind, 0.0)).collect();
        }
        for (acc, p) in layer_totals.iter_mut().zip(&profile) {
            acc.2 += p.wall_us / 1e3;
        }
        last_profile = profile;
    }
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    let plain_total_ms = plain_run(&mut detector, &input, args.iterations)?;

    let frames = u64::from(args.iterations);
    let mut sorted = frame_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let mut per_kind_ms: BTreeMap<&'static str, f64> = BTreeMap::new();
    for &(_, kind, ms) in &layer_totals {
        *per_kind_ms.entry(kind).or_default() += ms;
    }

    let comparison = if args.compare {
        let other = match kernel {
            KernelPath::Optimized => KernelPath::Reference,
            KernelPath::Reference => KernelPath::Optimized,
        };
        detector.set_kernel(other);
        for _ in 0..args.warmup.min(2) {
            detector.infer(&input, false)?;
        }
        let other_ms = plain_run(&mut detector, &input, args.iterations)? / f64::from(args.iterations);
        detector.set_kernel(kernel);
        let this_ms = plain_total_ms / f64::from(args.iterations);
        let (optimized, reference) = match kernel {
            KernelPath::Optimized => (this_ms, other_ms),
            KernelPath::Reference => (other_ms, this_ms),
        };
        Some(Comparison { optimized_ms_per_frame: optimized, reference_ms_per_frame: reference, speedup: reference / optimized })
    } else {
        None
    };

    let throughput = if args.threads > 1 {
        let start = Instant::now();
        std::thread::scope(|s| -> Result<()> {
            let workers: Vec<_> = (0..args.threads)
                .map(|_| {
                    let mut d = detector.clone();
                    let input = &input;
                    s.spawn(move || plain_run(&mut d, input, args.iterations))
                })
                .collect();
            for w in workers {
                w.join().map_err(|_| anyhow::anyhow!("benchmark worker panicked"))??;
            }
            Ok(())
        })?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let frames = u64::from(args.threads) * frames;
        Some(Throughput { threads: args.threads, frames, wall_ms, fps: frames as f64 / (wall_ms / 1e3) })
    } else {
        None
    };

    if let Some(path) = &args.profile_out {
        let file = std::fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
        write_profile_jsonl(&last_profile, std::io::BufWriter::new(file))?;
    }

    let plan = detector.context().plan();
    let report = BenchReport {
        model: model_name,
        input_size: [w, h],
        kernel: kernel.as_str(),
        seed: args.seed,
        warmup: args.warmup,
        frames_processed: frames,
        total_ms,
        fps: frames as f64 / (total_ms / 1e3),
        mean_frame_ms: frame_ms.iter().sum::<f64>() / frame_ms.len() as f64,
        median_frame_ms: sorted[sorted.len() / 2],
        min_frame_ms: sorted[0],
        max_frame_ms: sorted[sorted.len() - 1],
        per_layer: layer_totals
            .iter()
            .map(|&(layer, kind, ms)| LayerTiming { layer, kind, total_ms: ms, mean_us: ms * 1e3 / frames as f64 })
            .collect(),
        per_kind_ms,
        peak_arena_bytes: plan.arena_size,
        no_reuse_bytes: plan.no_reuse_size(),
        profiling_overhead: Overhead {
            profiled_total_ms: total_ms,
            plain_total_ms,
            relative: total_ms / plain_total_ms - 1.0,
        },
        comparison,
        throughput,
        excludes: "image decoding and letterboxing",
    };

    let mut out = std::io::stdout().lock();
    if json {
        serde_json::to_writer(&mut out, &report)?;
        writeln!(out)?;
    } else {
        print_report(&mut out, &report)?;
    }
    Ok(())
}

fn print_report(out: &mut impl Write, r: &BenchReport) -> Result<()> {
    writeln!(out, "model      {} @ {}x{}, {} kernels", r.model, r.input_size[0], r.input_size[1], r.kernel)?;
    writeln!(out, "frames     {} in {:.1} ms ({:.2} FPS)", r.frames_processed, r.total_ms, r.fps)?;
    writeln!(
        out,
        "per frame  mean {:.2} ms, median {:.2}, min {:.2}, max {:.2}",
        r.mean_frame_ms, r.median_frame_ms, r.min_frame_ms, r.max_frame_ms
    )?;
    writeln!(out, "arena      {} bytes (no reuse: {})", r.peak_arena_bytes, r.no_reuse_bytes)?;
    for (kind, ms) in &r.per_kind_ms {
        writeln!(out, "  {kind:<9} {ms:>10.2} ms ({:.1}%)", 100.0 * ms / r.total_ms)?;
    }
    writeln!(out, "profiling  {:+.2}% vs unprofiled", r.profiling_overhead.relative * 100.0)?;
    if let Some(c) = &r.comparison {
        writeln!(
            out,
            "speedup    {:.2}x (optimized {:.2} ms, reference {:.2} ms per frame)",
            c.speedup, c.optimized_ms_per_frame, c.reference_ms_per_frame
        )?;
    }
    if let Some(t) = &r.throughput {
        writeln!(out, "throughput {} threads: {} frames in {:.1} ms ({:.2} FPS)", t.threads, t.frames, t.wall_ms, t.fps)?;
    }
    writeln!(out, "excludes   {}", r.excludes)?;
    Ok(())
}
