use super::OpError;
use crate::tensor::{Shape, Tensor, TensorView};

pub fn upsample_output_shape(input: Shape, factor: usize) -> Result<Shape, OpError> {
    if factor == 0 {
        return Err(OpError::InvalidParams("upsample factor must be >= 1".into()));
    }
    Ok(Shape {
        h: input.h * factor,
        w: input.w * factor,
        ..input
    })
}

/// Nearest-neighbour upsampling: every element becomes a `factor x factor` block.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor, OpError> {
    let out_shape = upsample_output_shape(input.shape(), factor)?;
    let mut out = Tensor::zeros(out_shape)?;
    upsample_into(input.view(), factor, out.data_mut())?;
    Ok(out)
}

pub fn upsample_into(input: TensorView<'_>, factor: usize, out: &mut [f32]) -> Result<(), OpError> {
    let os = upsample_output_shape(input.shape, factor)?;
    if out.len() != os.len() {
        return Err(OpError::ShapeMismatch(format!(
            "upsample output buffer holds {} elements, expected {}",
            out.len(),
            os.len()
        )));
    }
    let is = input.shape;
    for (index, plane) in out.chunks_exact_mut(os.plane()).enumerate() {
        let src = input.plane(index / is.c, index % is.c);
        for (y, in_row) in src.chunks_exact(is.w).enumerate() {
            let first = y * factor * os.w;
            {
                let row = &mut plane[first..first + os.w];
                for (block, &v) in row.chunks_exact_mut(factor).zip(in_row) {
                    block.fill(v);
                }
            }
            for r in 1..factor {
                plane.copy_within(first..first + os.w, first + r * os.w);
            }
        }
    }
    Ok(())
}
