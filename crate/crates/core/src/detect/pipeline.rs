use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    decode_head, letterbox, nms, BBox, DetectError, ImageFrame, LetterboxTransform, RawDetection,
    DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD, DEFAULT_PAD_VALUE,
};
use crate::exec::{plan, ExecError, ExecutionContext, LayerProfile};
use crate::format::{HeadConfig, LayerParams, ModelGraph, META_INPUT_SIZE};
use crate::ops::KernelPath;
use crate::tensor::{Shape, Tensor};

/// A final detection in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f32,
    pub bbox: BBox,
}

impl Detection {
    pub fn to_record(&self, head: &HeadConfig) -> DetectionRecord {
        DetectionRecord {
            class: head
                .class_names
                .get(self.class_id)
                .cloned()
                .unwrap_or_else(|| self.class_id.to_string()),
            class_id: self.class_id,
            confidence: self.confidence,
            bbox: self.bbox.to_array(),
        }
    }
}

/// Serialized form of a detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub class: String,
    pub class_id: usize,
    pub confidence: f32,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub conf_threshold: f32,
    pub iou_threshold: f32,
    pub pad_value: u8,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            pad_value: DEFAULT_PAD_VALUE,
        }
    }
}

impl DetectConfig {
    /// Defaults, overridden by `conf_threshold` / `iou_threshold` metadata
    /// entries when they parse as numbers in `[0, 1]`.
    pub fn from_metadata(metadata: &BTreeMap<String, String>) -> Self {
        let read = |key: &str, default: f32| {
            metadata
                .get(key)
                .and_then(|v| v.trim().parse::<f32>().ok())
                .filter(|v| (0.0..=1.0).contains(v))
                .unwrap_or(default)
        };
        DetectConfig {
            conf_threshold: read("conf_threshold", DEFAULT_CONF_THRESHOLD),
            iou_threshold: read("iou_threshold", DEFAULT_IOU_THRESHOLD),
            pad_value: DEFAULT_PAD_VALUE,
        }
    }
}

/// A loaded model plus the per-thread state needed to run it.
///
/// The graph is shared; clone the detector to get an independent arena for
/// another thread.
#[derive(Debug, Clone)]
pub struct Detector {
    graph: Arc<ModelGraph>,
    context: ExecutionContext,
    config: DetectConfig,
}

impl Detector {
    pub fn new(graph: Arc<ModelGraph>, config: DetectConfig, kernel: KernelPath) -> Result<Self, DetectError> {
        let input = graph.input_shape().ok_or(ExecError::PlanMismatch)?;
        Self::with_input_size(graph, config, kernel, (input.w, input.h))
    }

    /// Like [`Detector::new`] but plans for a `(width, height)` input other
    /// than the one recorded in the model.
    pub fn with_input_size(
        graph: Arc<ModelGraph>,
        config: DetectConfig,
        kernel: KernelPath,
        size: (usize, usize),
    ) -> Result<Self, DetectError> {
        let recorded = graph.input_shape().ok_or(ExecError::PlanMismatch)?;
        let input = Shape::new(1, recorded.c, size.1, size.0).map_err(|e| DetectError::InvalidTarget {
            width: size.0,
            height: size.1,
            reason: e.to_string(),
        })?;
        let largest = graph.head.strides().into_iter().max().unwrap_or(1);
        if input.w % largest != 0 || input.h % largest != 0 || input.w < 32 || input.h < 32 {
            return Err(DetectError::InvalidTarget {
                width: input.w,
                height: input.h,
                reason: format!("must be at least 32 and a multiple of the largest stride {largest}"),
            });
        }
        let graph = if input == recorded {
            graph
        } else {
            Arc::new(resized(&graph, input))
        };
        let context = ExecutionContext::from_plan(plan(&graph, input)?, kernel);
        Ok(Detector {
            graph,
            context,
            config,
        })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn config(&self) -> &DetectConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: DetectConfig) {
        self.config = config;
    }

    pub fn context(&self) -> &ExecutionContext {
        &self.context
    }

    pub fn set_kernel(&mut self, kernel: KernelPath) {
        self.context.set_kernel(kernel);
    }

    /// Network input size as `(width, height)`.
    pub fn input_size(&self) -> (usize, usize) {
        let s = self.context.plan().input_shape();
        (s.w, s.h)
    }

    pub fn preprocess(&self, frame: &ImageFrame) -> Result<(Tensor, LetterboxTransform), DetectError> {
        letterbox(frame, self.input_size(), self.config.pad_value)
    }

    /// Runs the network on a preprocessed tensor and returns NMS survivors in
    /// network-input pixels, plus layer profiles when requested.
    pub fn infer(
        &mut self,
        input: &Tensor,
        profile: bool,
    ) -> Result<(Vec<RawDetection>, Vec<LayerProfile>), DetectError> {
        let (heads, profiles) = self.context.run(&self.graph, input, profile)?;
        let mut candidates = Vec::new();
        for (scale, tensor) in heads.iter().enumerate() {
            candidates.extend(decode_head(tensor, scale, &self.graph.head, self.config.conf_threshold)?);
        }
        Ok((nms(&candidates, self.config.iou_threshold), profiles))
    }

    /// Full pipeline: letterbox, run, decode, NMS, map back to the frame.
    pub fn detect(&mut self, frame: &ImageFrame) -> Result<Vec<Detection>, DetectError> {
        let (input, transform) = self.preprocess(frame)?;
        let (raw, _) = self.infer(&input, false)?;
        Ok(to_frame(&raw, &transform, frame.width(), frame.height()))
    }
}

/// Copy of `graph` whose input layer declares `input` instead.
fn resized(graph: &ModelGraph, input: Shape) -> ModelGraph {
    let mut g = graph.clone();
    if let Some(LayerParams::Input { height, width, .. }) = g.layers.first_mut().map(|l| &mut l.params) {
        *height = input.h;
        *width = input.w;
    }
    g.metadata
        .insert(META_INPUT_SIZE.to_string(), format!("{}x{}", input.w, input.h));
    g
}

/// Maps network-space boxes back to the frame and clamps them to its bounds.
/// Boxes with nothing left inside the frame are dropped.
fn to_frame(raw: &[RawDetection], transform: &LetterboxTransform, width: usize, height: usize) -> Vec<Detection> {
    let (w, h) = (width as f32, height as f32);
    raw.iter()
        .filter_map(|r| {
            let (x1, y1) = transform.inverse(r.bbox.x1, r.bbox.y1);
            let (x2, y2) = transform.inverse(r.bbox.x2, r.bbox.y2);
            let bbox = BBox::new(x1.clamp(0.0, w), y1.clamp(0.0, h), x2.clamp(0.0, w), y2.clamp(0.0, h));
            bbox.is_valid().then_some(Detection {
                class_id: r.class_id,
                confidence: r.confidence,
                bbox,
            })
        })
        .collect()
}

/// One-shot detection with thresholds taken from the model metadata.
pub fn detect(graph: &ModelGraph, frame: &ImageFrame) -> Result<Vec<Detection>, DetectError> {
    let config = DetectConfig::from_metadata(&graph.metadata);
    let mut detector = Detector::new(Arc::new(graph.clone()), config, KernelPath::Optimized)?;
    detector.detect(frame)
}

impl From<crate::format::ValidationError> for DetectError {
    fn from(e: crate::format::ValidationError) -> Self {
        DetectError::Exec(ExecError::InvalidGraph(e))
    }
}
