use super::DetectError;
use crate::tensor::{Shape, Tensor};

/// An 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageFrame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, DetectError> {
        if width == 0 || height == 0 {
            return Err(DetectError::EmptyFrame { width, height });
        }
        let expected = width * height * 3;
        if pixels.len() != expected {
            return Err(DetectError::FrameLength {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(ImageFrame {
            width,
            height,
            pixels,
        })
    }

    /// Frame filled with one color.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, DetectError> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, pixels)
    }

    /// Drops the alpha channel of an RGBA buffer.
    pub fn from_rgba(width: usize, height: usize, rgba: &[u8]) -> Result<Self, DetectError> {
        if rgba.len() != width * height * 4 {
            return Err(DetectError::FrameLength {
                width,
                height,
                expected: width * height * 4,
                actual: rgba.len(),
            });
        }
        let pixels = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Maps source-image coordinates into network-input coordinates:
/// `net = src * scale + pad`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f32,
    pub pad_x: f32,
    pub pad_y: f32,
}

impl LetterboxTransform {
    /// Aspect-preserving fit of a `width x height` frame into `target`, centered.
    pub fn fit(width: usize, height: usize, target: (usize, usize)) -> Self {
        let (tw, th) = (target.0 as f64, target.1 as f64);
        let (w, h) = (width as f64, height as f64);
        let scale = (tw / w).min(th / h);
        LetterboxTransform {
            scale: scale as f32,
            pad_x: ((tw - w * scale) / 2.0) as f32,
            pad_y: ((th - h * scale) / 2.0) as f32,
        }
    }

    pub fn forward(&self, x: f32, y: f32) -> (f32, f32) {
        (x * self.scale + self.pad_x, y * self.scale + self.pad_y)
    }

    pub fn inverse(&self, x: f32, y: f32) -> (f32, f32) {
        ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)
    }
}

/// Source sampling for one output row or column.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
    inside: bool,
}

/// Half-pixel-centre bilinear taps along one axis.
fn taps(out_len: usize, src_len: usize, scale: f32, pad: f32) -> Vec<Tap> {
    let last = (src_len - 1) as f32;
    (0..out_len)
        .map(|d| {
            let u = (d as f32 + 0.5 - pad) / scale;
            let inside = u >= 0.0 && u <= src_len as f32;
            let s = (u - 0.5).clamp(0.0, last);
            let lo = s.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(src_len - 1),
                frac: s - lo as f32,
                inside,
            }
        })
        .collect()
}

/// Resizes `frame` into a `(1, 3, th, tw)` tensor in `[0, 1]`, preserving
/// aspect ratio and filling the borders with `pad_value`.
pub fn letterbox(
    frame: &ImageFrame,
    target: (usize, usize),
    pad_value: u8,
) -> Result<(Tensor, LetterboxTransform), DetectError> {
    let (tw, th) = target;
    if tw < 32 || th < 32 {
        return Err(DetectError::InvalidTarget {
            width: tw,
            height: th,
            reason: "both dimensions must be at least 32".into(),
        });
    }
    if frame.width == 0 || frame.height == 0 {
        return Err(DetectError::EmptyFrame {
            width: frame.width,
            height: frame.height,
        });
    }
    let transform = LetterboxTransform::fit(frame.width, frame.height, target);
    let xs = taps(tw, frame.width, transform.scale, transform.pad_x);
    let ys = taps(th, frame.height, transform.scale, transform.pad_y);

    let shape = Shape::new(1, 3, th, tw).map_err(|e| DetectError::InvalidTarget {
        width: tw,
        height: th,
        reason: e.to_string(),
    })?;
    let pad = f32::from(pad_value) / 255.0;
    let mut tensor = Tensor::full(shape, pad).map_err(|e| DetectError::InvalidTarget {
        width: tw,
        height: th,
        reason: e.to_string(),
    })?;
    let plane = tw * th;
    let src = &frame.pixels;
    let row_stride = frame.width * 3;
    let data = tensor.data_mut();
    for (dy, ty) in ys.iter().enumerate() {
        if !ty.inside {
            continue;
        }
        let row_lo = &src[ty.lo * row_stride..][..row_stride];
        let row_hi = &src[ty.hi * row_stride..][..row_stride];
        for (dx, tx) in xs.iter().enumerate() {
            if !tx.inside {
                continue;
            }
            for c in 0..3 {
                let p = |row: &[u8], x: usize| f32::from(row[x * 3 + c]);
                let top = p(row_lo, tx.lo) + (p(row_lo, tx.hi) - p(row_lo, tx.lo)) * tx.frac;
                let bottom = p(row_hi, tx.lo) + (p(row_hi, tx.hi) - p(row_hi, tx.lo)) * tx.frac;
                let value = top + (bottom - top) * ty.frac;
                data[c * plane + dy * tw + dx] = value / 255.0;
            }
        }
    }
    Ok((tensor, transform))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> ImageFrame {
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                pixels.extend([(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        ImageFrame::new(w, h, pixels).unwrap()
    }

    #[test]
    fn same_size_is_pass_through() {
        let frame = gradient(320, 320);
        let (t, tr) = letterbox(&frame, (320, 320), 114).unwrap();
        assert_eq!(tr, LetterboxTransform { scale: 1.0, pad_x: 0.0, pad_y: 0.0 });
        for y in 0..320 {
            for x in 0..320 {
                let p = frame.pixel(x, y);
                for c in 0..3 {
                    assert_eq!(t.get(0, c, y, x), f32::from(p[c]) / 255.0);
                }
            }
        }
    }

    #[test]
    fn landscape_frame_is_padded_vertically() {
        let frame = gradient(640, 480);
        let (t, tr) = letterbox(&frame, (320, 320), 114).unwrap();
        assert_eq!(tr.scale, 0.5);
        assert_eq!((tr.pad_x, tr.pad_y), (0.0, 40.0));
        let pad = 114.0 / 255.0;
        assert_eq!(t.get(0, 0, 39, 100), pad);
        assert_eq!(t.get(0, 1, 280, 100), pad);
        assert_ne!(t.get(0, 2, 40, 100), pad);
        assert_ne!(t.get(0, 2, 279, 100), pad);
    }

    #[test]
    fn content_corners_invert_to_frame_corners() {
        for &(w, h) in &[(640, 480), (641, 359), (100, 333), (32, 32), (1, 1), (1920, 1080), (7, 500)] {
            let frame = ImageFrame::filled(w, h, [1, 2, 3]).unwrap();
            let (_, tr) = letterbox(&frame, (320, 256), 0).unwrap();
            let (x0, y0) = (tr.pad_x, tr.pad_y);
            let (x1, y1) = tr.forward(w as f32, h as f32);
            for ((nx, ny), (sx, sy)) in [((x0, y0), (0.0, 0.0)), ((x1, y0), (w as f32, 0.0)), ((x0, y1), (0.0, h as f32)), ((x1, y1), (w as f32, h as f32))] {
                let (rx, ry) = tr.inverse(nx, ny);
                assert!((rx - sx).abs() <= 0.5 && (ry - sy).abs() <= 0.5, "{w}x{h}: {rx},{ry} vs {sx},{sy}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(ImageFrame::new(0, 4, vec![]), Err(DetectError::EmptyFrame { .. })));
        assert!(matches!(ImageFrame::new(2, 2, vec![0; 11]), Err(DetectError::FrameLength { .. })));
        let frame = ImageFrame::filled(4, 4, [0, 0, 0]).unwrap();
        assert!(matches!(letterbox(&frame, (16, 320), 0), Err(DetectError::InvalidTarget { .. })));
    }

    #[test]
    fn rgba_drops_alpha() {
        let f = ImageFrame::from_rgba(2, 1, &[1, 2, 3, 255, 4, 5, 6, 0]).unwrap();
        assert_eq!(f.pixels(), &[1, 2, 3, 4, 5, 6]);
    }
}
