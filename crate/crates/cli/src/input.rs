use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use maskedge::detect::{DetectConfig, Detector, ImageFrame};
use maskedge::format::{parse_model, ModelGraph};

use crate::{ModelArgs, UsageError};

/// Parses `320` or `320x256` into `(width, height)`.
pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid size `{s}`"));
    let (w, h) = match s.split_once(['x', 'X']) {
        Some((w, h)) => (parse(w)?, parse(h)?),
        None => {
            let n = parse(s)?;
            (n, n)
        }
    };
    if w == 0 || h == 0 {
        return Err(format!("size `{s}` must be positive"));
    }
    Ok((w, h))
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read model {}", path.display()))?;
    let graph = parse_model(&bytes).with_context(|| format!("invalid model {}", path.display()))?;
    log::info!(
        "loaded {} ({} layers, {} parameters)",
        path.display(),
        graph.layers.len(),
        graph.parameter_count()
    );
    Ok(graph)
}

pub fn load_image(path: &Path) -> Result<ImageFrame> {
    let img = image::open(path).with_context(|| format!("cannot decode image {}", path.display()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(ImageFrame::new(w as usize, h as usize, rgb.into_raw())?)
}

pub fn check_threshold(name: &str, value: f32) -> Result<f32> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(UsageError(format!("--{name} must be within [0, 1], got {value}")).into())
    }
}

/// Builds a detector from the model options, with thresholds from the model
/// metadata unless overridden.
pub fn detector(args: &ModelArgs, conf: Option<f32>, iou: Option<f32>) -> Result<Detector> {
    let graph = Arc::new(load_model(&args.model)?);
    let mut config = DetectConfig::from_metadata(&graph.metadata);
    if let Some(c) = conf {
        config.conf_threshold = check_threshold("conf", c)?;
    }
    if let Some(i) = iou {
        config.iou_threshold = check_threshold("iou", i)?;
    }
    let kernel = args.kernel.into();
    let detector = match args.size {
        Some(size) => Detector::with_input_size(graph, config, kernel, size),
        None => Detector::new(graph, config, kernel),
    };
    detector.context("cannot prepare the model for inference")
}
