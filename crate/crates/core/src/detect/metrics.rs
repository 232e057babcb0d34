use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{iou, BBox, Detection};

/// A labelled box in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    /// AP per class id, for every class with at least one ground-truth box.
    pub per_class: BTreeMap<usize, f64>,
    /// Mean of `per_class`, or 0 when there is no ground truth at all.
    pub map: f64,
}

/// 101-point interpolated average precision.
///
/// `detections[i]` and `ground_truth[i]` belong to image `i`. Per class, all
/// detections are visited by descending confidence (ties by image, then by
/// position) and each claims the unmatched same-image ground-truth box with the
/// highest IoU, provided that IoU is at least `iou_threshold`. Anything else is
/// a false positive.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruthBox>],
    iou_threshold: f32,
) -> ApReport {
    let classes: BTreeSet<usize> = ground_truth.iter().flatten().map(|g| g.class_id).collect();
    let mut per_class = BTreeMap::new();
    for &class in &classes {
        per_class.insert(class, class_ap(detections, ground_truth, class, iou_threshold));
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    ApReport { per_class, map }
}

fn class_ap(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruthBox>],
    class: usize,
    iou_threshold: f32,
) -> f64 {
    let gts: Vec<Vec<&BBox>> = ground_truth
        .iter()
        .map(|g| g.iter().filter(|b| b.class_id == class).map(|b| &b.bbox).collect())
        .collect();
    let positives: usize = gts.iter().map(Vec::len).sum();
    if positives == 0 {
        return 0.0;
    }
    let mut dets: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, d)| d.iter().filter(|d| d.class_id == class).map(move |d| (img, d)))
        .collect();
    // Stable sort keeps image then position order for equal confidences.
    dets.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(dets.len());
    for (k, (img, det)) in dets.iter().enumerate() {
        let best = gts
            .get(*img)
            .into_iter()
            .flatten()
            .enumerate()
            .filter(|(j, _)| !matched[*img][*j])
            .map(|(j, g)| (j, iou(&det.bbox, g)))
            .filter(|&(_, v)| v >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((j, _)) = best {
            matched[*img][j] = true;
            tp += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (k + 1) as f64;
        curve.push((recall, precision));
    }

    // Running max from the tail gives the precision envelope.
    let mut envelope = curve.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        if let Some(&(_, p)) = envelope.iter().find(|(rec, _)| *rec >= level) {
            sum += p;
        }
    }
    sum / 101.0
}
