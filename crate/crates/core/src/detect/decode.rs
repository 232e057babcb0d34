use super::{BBox, DetectError, RawDetection};
use crate::format::HeadConfig;
use crate::tensor::Tensor;

/// Upper bound applied to width/height logits before `exp`.
pub const EXP_CLAMP: f32 = 4.0;

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes one head tensor of shape `(1, anchors * (5 + classes), gh, gw)`.
///
/// Per anchor the channels are `tx, ty, tw, th, objectness, class logits..`.
/// Box center is `(sigmoid(t) + cell) * stride`, size is `anchor * exp(min(t, 4))`,
/// and confidence is `sigmoid(obj) * sigmoid(class)`. Candidates are emitted
/// in (anchor, row, column, class) order.
pub fn decode_head(
    head_tensor: &Tensor,
    scale_index: usize,
    head: &HeadConfig,
    conf_threshold: f32,
) -> Result<Vec<RawDetection>, DetectError> {
    let scale = &head.scales[scale_index];
    let shape = head_tensor.shape();
    let expected = head.channels(scale_index);
    if shape.c != expected {
        return Err(DetectError::ChannelMismatch {
            scale: scale_index,
            expected,
            actual: shape.c,
        });
    }
    let per_anchor = 5 + head.num_classes;
    let plane = shape.plane();
    let data = head_tensor.data();
    let stride = scale.stride as f32;
    let mut out = Vec::new();
    for (a, &(anchor_w, anchor_h)) in scale.anchors.iter().enumerate() {
        let channel = |k: usize| &data[(a * per_anchor + k) * plane..][..plane];
        let (tx, ty, tw, th, obj) = (channel(0), channel(1), channel(2), channel(3), channel(4));
        for cy in 0..shape.h {
            for cx in 0..shape.w {
                let i = cy * shape.w + cx;
                let objectness = sigmoid(obj[i]);
                // The class factor is at most 1, so this cell cannot pass.
                if objectness < conf_threshold {
                    continue;
                }
                let center_x = (sigmoid(tx[i]) + cx as f32) * stride;
                let center_y = (sigmoid(ty[i]) + cy as f32) * stride;
                let w = anchor_w * tw[i].min(EXP_CLAMP).exp();
                let h = anchor_h * th[i].min(EXP_CLAMP).exp();
                let bbox = BBox::from_center(center_x, center_y, w, h);
                for class_id in 0..head.num_classes {
                    let confidence = objectness * sigmoid(channel(5 + class_id)[i]);
                    if confidence >= conf_threshold {
                        out.push(RawDetection {
                            class_id,
                            confidence,
                            bbox,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}
