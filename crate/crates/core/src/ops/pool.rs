use super::{KernelPath, OpError};
use crate::tensor::{Shape, Tensor, TensorView};

pub fn pool_output_shape(
    input: Shape,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Shape, OpError> {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(OpError::InvalidParams(format!(
            "pool kernel {kernel:?} and stride {stride:?} must be >= 1"
        )));
    }
    if kh > input.h || kw > input.w {
        return Err(OpError::ShapeMismatch(format!(
            "pool kernel {kh}x{kw} larger than input {}x{}",
            input.h, input.w
        )));
    }
    Ok(Shape {
        h: (input.h - kh) / sh + 1,
        w: (input.w - kw) / sw + 1,
        ..input
    })
}

pub fn max_pool(
    input: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor, OpError> {
    max_pool_with(input, kernel, stride, KernelPath::Optimized)
}

pub fn max_pool_with(
    input: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    path: KernelPath,
) -> Result<Tensor, OpError> {
    let out_shape = pool_output_shape(input.shape(), kernel, stride)?;
    let mut out = Tensor::zeros(out_shape)?;
    max_pool_into(input.view(), kernel, stride, out.data_mut(), path)?;
    Ok(out)
}

pub fn max_pool_into(
    input: TensorView<'_>,
    kernel: (usize, usize),
    stride: (usize, usize),
    out: &mut [f32],
    path: KernelPath,
) -> Result<(), OpError> {
    let os = pool_output_shape(input.shape, kernel, stride)?;
    if out.len() != os.len() {
        return Err(OpError::ShapeMismatch(format!(
            "pool output buffer holds {} elements, expected {}",
            out.len(),
            os.len()
        )));
    }
    let is = input.shape;
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    match path {
        KernelPath::Reference => {
            for n in 0..is.n {
                for c in 0..is.c {
                    for oy in 0..os.h {
                        for ox in 0..os.w {
                            let mut best = f32::NEG_INFINITY;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let v = input.data[is.offset(n, c, oy * sh + ky, ox * sw + kx)];
                                    best = best.max(v);
                                }
                            }
                            out[os.offset(n, c, oy, ox)] = best;
                        }
                    }
                }
            }
        }
        KernelPath::Optimized => {
            // Row-wise running max over the window, same visiting order as the reference.
            for (index, plane) in out.chunks_exact_mut(os.plane()).enumerate() {
                let src = input.plane(index / is.c, index % is.c);
                for oy in 0..os.h {
                    let row = &mut plane[oy * os.w..(oy + 1) * os.w];
                    row.fill(f32::NEG_INFINITY);
                    for ky in 0..kh {
                        let in_row = &src[(oy * sh + ky) * is.w..][..is.w];
                        for kx in 0..kw {
                            for (o, &x) in row.iter_mut().zip(in_row[kx..].iter().step_by(sw)) {
                                *o = o.max(x);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
