use super::OpError;
use crate::tensor::{Shape, Tensor, TensorView};

/// Output shape of a channel concat (`concat == true`) or an elementwise add.
pub fn merged_shape(a: Shape, b: Shape, concat: bool) -> Result<Shape, OpError> {
    if concat {
        if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
            return Err(OpError::ShapeMismatch(format!(
                "concat needs matching batch and spatial dims, got {a} and {b}"
            )));
        }
        Ok(Shape { c: a.c + b.c, ..a })
    } else {
        if a != b {
            return Err(OpError::ShapeMismatch(format!(
                "add needs identical shapes, got {a} and {b}"
            )));
        }
        Ok(a)
    }
}

/// Channel concatenation; `a`'s channels come first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor, OpError> {
    let shape = merged_shape(a.shape(), b.shape(), true)?;
    let mut out = Tensor::zeros(shape)?;
    concat_into(a.view(), b.view(), out.data_mut())?;
    Ok(out)
}

pub fn concat_into(a: TensorView<'_>, b: TensorView<'_>, out: &mut [f32]) -> Result<(), OpError> {
    let shape = merged_shape(a.shape, b.shape, true)?;
    if out.len() != shape.len() {
        return Err(OpError::ShapeMismatch("concat output buffer has wrong length".into()));
    }
    let a_len = a.shape.c * a.shape.plane();
    let b_len = b.shape.c * b.shape.plane();
    for (n, item) in out.chunks_exact_mut(a_len + b_len).enumerate() {
        item[..a_len].copy_from_slice(&a.data[n * a_len..(n + 1) * a_len]);
        item[a_len..].copy_from_slice(&b.data[n * b_len..(n + 1) * b_len]);
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, OpError> {
    let shape = merged_shape(a.shape(), b.shape(), false)?;
    let mut out = Tensor::zeros(shape)?;
    add_into(a.view(), b.view(), out.data_mut())?;
    Ok(out)
}

pub fn add_into(a: TensorView<'_>, b: TensorView<'_>, out: &mut [f32]) -> Result<(), OpError> {
    merged_shape(a.shape, b.shape, false)?;
    if out.len() != a.data.len() {
        return Err(OpError::ShapeMismatch("add output buffer has wrong length".into()));
    }
    for ((o, &x), &y) in out.iter_mut().zip(a.data).zip(b.data) {
        *o = x + y;
    }
    Ok(())
}
