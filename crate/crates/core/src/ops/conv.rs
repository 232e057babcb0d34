use super::{KernelPath, OpError};
use crate::tensor::{Shape, Tensor, TensorView};

/// Hyperparameters of a 2-D cross-correlation. `groups == in == out` channels
/// makes it depthwise; a 1x1 kernel with `groups == 1` is pointwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ConvParams {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvParams {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvParams {
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            groups: 1,
            has_bias: true,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    /// Checks the parameter invariants against a concrete input channel count.
    pub fn validate(&self, in_channels: usize) -> Result<(), OpError> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if self.out_channels == 0 || kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(OpError::InvalidParams(format!(
                "out_channels, kernel and stride must be >= 1 (got {self:?})"
            )));
        }
        if self.groups == 0 || in_channels % self.groups != 0 || self.out_channels % self.groups != 0
        {
            return Err(OpError::InvalidParams(format!(
                "groups {} must divide input channels {} and output channels {}",
                self.groups, in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Number of weight elements for the given input channel count (bias excluded).
    pub fn weight_len(&self, in_channels: usize) -> usize {
        self.out_channels * (in_channels / self.groups.max(1)) * self.kernel.0 * self.kernel.1
    }

    pub fn weight_shape(&self, in_channels: usize) -> (usize, usize, usize, usize) {
        (
            self.out_channels,
            in_channels / self.groups.max(1),
            self.kernel.0,
            self.kernel.1,
        )
    }
}

pub fn conv_output_shape(input: Shape, params: &ConvParams) -> Result<Shape, OpError> {
    params.validate(input.c)?;
    let (kh, kw) = params.kernel;
    let padded_h = input.h + 2 * params.padding.0;
    let padded_w = input.w + 2 * params.padding.1;
    if kh > padded_h || kw > padded_w {
        return Err(OpError::ShapeMismatch(format!(
            "kernel {kh}x{kw} larger than padded input {padded_h}x{padded_w}"
        )));
    }
    let out = Shape {
        n: input.n,
        c: params.out_channels,
        h: (padded_h - kh) / params.stride.0 + 1,
        w: (padded_w - kw) / params.stride.1 + 1,
    };
    Ok(out)
}

/// Convolution with the default (optimized) kernel path.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&[f32]>,
    params: &ConvParams,
) -> Result<Tensor, OpError> {
    conv2d_with(input, weights, bias, params, KernelPath::Optimized)
}

pub fn conv2d_with(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&[f32]>,
    params: &ConvParams,
    path: KernelPath,
) -> Result<Tensor, OpError> {
    let in_shape = input.shape();
    let out_shape = conv_output_shape(in_shape, params)?;
    let expected = params.weight_shape(in_shape.c);
    let ws = weights.shape();
    if (ws.n, ws.c, ws.h, ws.w) != expected {
        return Err(OpError::ShapeMismatch(format!(
            "weights {ws} do not match expected {expected:?} for input {in_shape} and {params:?}"
        )));
    }
    let mut out = Tensor::zeros(out_shape)?;
    conv2d_into(
        input.view(),
        weights.data(),
        bias,
        params,
        out_shape,
        out.data_mut(),
        path,
    )?;
    Ok(out)
}

/// Writes the convolution of `input` into `out`, which must hold `out_shape`.
pub fn conv2d_into(
    input: TensorView<'_>,
    weights: &[f32],
    bias: Option<&[f32]>,
    params: &ConvParams,
    out_shape: Shape,
    out: &mut [f32],
    path: KernelPath,
) -> Result<(), OpError> {
    let expected_out = conv_output_shape(input.shape, params)?;
    if expected_out != out_shape || out.len() != out_shape.len() {
        return Err(OpError::ShapeMismatch(format!(
            "output buffer for {out_shape} does not match computed {expected_out}"
        )));
    }
    if weights.len() != params.weight_len(input.shape.c) {
        return Err(OpError::ShapeMismatch(format!(
            "weight length {} does not match expected {}",
            weights.len(),
            params.weight_len(input.shape.c)
        )));
    }
    match bias {
        Some(b) if b.len() != params.out_channels => {
            return Err(OpError::ShapeMismatch(format!(
                "bias length {} does not match out_channels {}",
                b.len(),
                params.out_channels
            )))
        }
        None if params.has_bias => {
            return Err(OpError::InvalidParams(
                "layer declares a bias but none was supplied".into(),
            ))
        }
        _ => {}
    }
    match path {
        KernelPath::Reference => conv_reference(input, weights, bias, params, out_shape, out),
        KernelPath::Optimized => conv_optimized(input, weights, bias, params, out_shape, out),
    }
    Ok(())
}

fn conv_reference(
    input: TensorView<'_>,
    weights: &[f32],
    bias: Option<&[f32]>,
    p: &ConvParams,
    out_shape: Shape,
    out: &mut [f32],
) {
    let is = input.shape;
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let in_per_group = is.c / p.groups;
    let out_per_group = p.out_channels / p.groups;
    for n in 0..is.n {
        for oc in 0..out_shape.c {
            let group = oc / out_per_group;
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let mut acc = 0.0f32;
                    for icg in 0..in_per_group {
                        let ic = group * in_per_group + icg;
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= is.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= is.w as isize {
                                    continue;
                                }
                                let w = weights[((oc * in_per_group + icg) * kh + ky) * kw + kx];
                                let x = input.data[is.offset(n, ic, iy as usize, ix as usize)];
                                acc += w * x;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[oc];
                    }
                    out[out_shape.offset(n, oc, oy, ox)] = acc;
                }
            }
        }
    }
}

/// Output indices `o` in `[0, out_len)` for which `o * stride + tap - pad`
/// lands inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let start = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let end = if in_len + pad > tap {
        ((in_len - 1 + pad - tap) / stride + 1).min(out_len)
    } else {
        0
    };
    (start, end.max(start))
}

fn conv_optimized(
    input: TensorView<'_>,
    weights: &[f32],
    bias: Option<&[f32]>,
    p: &ConvParams,
    out_shape: Shape,
    out: &mut [f32],
) {
    let is = input.shape;
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let in_per_group = is.c / p.groups;
    let out_per_group = p.out_channels / p.groups;
    let out_plane_len = out_shape.plane();
    let (ow, in_w) = (out_shape.w, is.w);

    for (plane_index, plane) in out.chunks_exact_mut(out_plane_len).enumerate() {
        let n = plane_index / out_shape.c;
        let oc = plane_index % out_shape.c;
        let group = oc / out_per_group;
        plane.fill(0.0);
        for icg in 0..in_per_group {
            let in_plane = input.plane(n, group * in_per_group + icg);
            let kernel = &weights[(oc * in_per_group + icg) * kh * kw..][..kh * kw];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(out_shape.h, is.h, sh, ky, ph);
                for kx in 0..kw {
                    let w = kernel[ky * kw + kx];
                    let (ox0, ox1) = valid_range(ow, in_w, sw, kx, pw);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let ix0 = ox0 * sw + kx - pw;
                    for oy in oy0..oy1 {
                        let iy = oy * sh + ky - ph;
                        let in_row = &in_plane[iy * in_w..(iy + 1) * in_w];
                        let out_row = &mut plane[oy * ow + ox0..oy * ow + ox1];
                        if sw == 1 {
                            let src = &in_row[ix0..ix0 + out_row.len()];
                            for (o, &x) in out_row.iter_mut().zip(src) {
                                *o += w * x;
                            }
                        } else {
                            for (o, &x) in out_row.iter_mut().zip(in_row[ix0..].iter().step_by(sw)) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let b = b[oc];
            for o in plane.iter_mut() {
                *o += b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f32>) -> Tensor {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3).unwrap(), data).unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let input = t((1, 1, 3, 3), (0..9).map(|v| v as f32 * 0.5 - 1.0).collect());
        let w = t((1, 1, 1, 1), vec![1.0]);
        let p = ConvParams::new(1, 1, 1, 0).with_bias(false);
        for path in [KernelPath::Reference, KernelPath::Optimized] {
            let out = conv2d_with(&input, &w, None, &p, path).unwrap();
            assert_eq!(out, input);
        }
    }

    #[test]
    fn zero_input_yields_bias() {
        let input = Tensor::zeros(Shape::new(1, 2, 5, 5).unwrap()).unwrap();
        let w = t((3, 2, 3, 3), (0..54).map(|v| (v as f32).sin()).collect());
        let bias = [0.5, -1.25, 3.0];
        let p = ConvParams::new(3, 3, 2, 1);
        for path in [KernelPath::Reference, KernelPath::Optimized] {
            let out = conv2d_with(&input, &w, Some(&bias), &p, path).unwrap();
            assert_eq!(out.shape(), Shape::new(1, 3, 3, 3).unwrap());
            for k in 0..3 {
                assert!(out.view().plane(0, k).iter().all(|&v| v == bias[k]));
            }
        }
    }

    #[test]
    fn hand_computed_two_by_two() {
        // 3x3 input, 2x2 kernel, no padding: each output is a 2x2 window dot product.
        let input = t((1, 1, 3, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = t((1, 1, 2, 2), vec![1.0, 0.0, 0.0, -1.0]);
        let p = ConvParams::new(1, 2, 1, 0).with_bias(false);
        let out = conv2d_with(&input, &w, None, &p, KernelPath::Reference).unwrap();
        assert_eq!(out.data(), &[-4.0, -4.0, -4.0, -4.0]);
        // Padding 1, stride 2: corners see only one in-bounds tap of [1,0;0,-1].
        let p = ConvParams::new(1, 2, 2, 1).with_bias(false);
        let out = conv2d_with(&input, &w, None, &p, KernelPath::Optimized).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 2, 2).unwrap());
        assert_eq!(out.data(), &[-1.0, -3.0, -7.0, 5.0 - 9.0]);
    }

    #[test]
    fn rejects_bad_groups_and_weights() {
        let input = Tensor::zeros(Shape::new(1, 3, 4, 4).unwrap()).unwrap();
        let w = t((4, 1, 3, 3), vec![0.0; 36]);
        let p = ConvParams::new(4, 3, 1, 1).with_groups(2).with_bias(false);
        assert!(matches!(
            conv2d(&input, &w, None, &p),
            Err(OpError::InvalidParams(_))
        ));
        let p = ConvParams::new(4, 3, 1, 1).with_bias(false);
        assert!(matches!(
            conv2d(&input, &w, None, &p),
            Err(OpError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn valid_range_matches_scan() {
        for out_len in 1..7 {
            for in_len in 1..9 {
                for stride in 1..4 {
                    for tap in 0..4 {
                        for pad in 0..3 {
                            let scan: Vec<usize> = (0..out_len)
                                .filter(|&o| {
                                    let i = (o * stride + tap) as isize - pad as isize;
                                    i >= 0 && i < in_len as isize
                                })
                                .collect();
                            let (a, b) = valid_range(out_len, in_len, stride, tap, pad);
                            assert_eq!((a..b).collect::<Vec<_>>(), scan);
                        }
                    }
                }
            }
        }
    }
}
