//! Frame-to-detections pipeline and detection metrics.

mod boxes;
mod decode;
mod frame;
mod metrics;
mod pipeline;

use thiserror::Error;

use crate::exec::ExecError;

pub use boxes::{iou, nms, BBox, RawDetection};
pub use decode::{decode_head, sigmoid, EXP_CLAMP};
pub use frame::{letterbox, ImageFrame, LetterboxTransform};
pub use metrics::{average_precision, ApReport, GroundTruthBox};
pub use pipeline::{detect, DetectConfig, Detection, DetectionRecord, Detector};

pub const DEFAULT_CONF_THRESHOLD: f32 = 0.30;
pub const DEFAULT_IOU_THRESHOLD: f32 = 0.45;
pub const DEFAULT_PAD_VALUE: u8 = 114;
pub const DEFAULT_INPUT_SIZE: usize = 320;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectError {
    #[error("frame is empty ({width}x{height})")]
    EmptyFrame { width: usize, height: usize },
    #[error("frame buffer holds {actual} bytes, {width}x{height} RGB needs {expected}")]
    FrameLength {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("letterbox target {width}x{height} is invalid: {reason}")]
    InvalidTarget {
        width: usize,
        height: usize,
        reason: String,
    },
    #[error("head tensor at scale {scale} has {actual} channels, expected {expected}")]
    ChannelMismatch {
        scale: usize,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Exec(#[from] ExecError),
}
