use serde::{Deserialize, Serialize};

/// Axis-aligned box as corners `(x1, y1)`-`(x2, y2)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        f64::from(self.width().max(0.0)) * f64::from(self.height().max(0.0))
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union, computed in double precision.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = f64::from(a.x2.min(b.x2)) - f64::from(a.x1.max(b.x1));
    let ih = f64::from(a.y2.min(b.y2)) - f64::from(a.y1.max(b.y1));
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).min(1.0) as f32
}

/// A decoded candidate in network-input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub class_id: usize,
    pub confidence: f32,
    pub bbox: BBox,
}

/// Class-aware greedy NMS. Candidates are visited by descending confidence
/// (ties by original index); one is kept iff its IoU with every kept
/// candidate of the same class is below `iou_threshold`.
pub fn nms(candidates: &[RawDetection], iou_threshold: f32) -> Vec<RawDetection> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .confidence
            .total_cmp(&candidates[a].confidence)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<RawDetection> = Vec::new();
    for i in order {
        let c = &candidates[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == c.class_id && iou(&k.bbox, &c.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(*c);
        }
    }
    kept
}
