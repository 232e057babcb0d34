//! The closed operator set executed by the runtime.
//!
//! Every hot operator has two implementations: a straightforward reference
//! loop and an optimized path written so the compiler can vectorize the
//! innermost loop. Both paths accumulate each output element in the same
//! order, so they agree bitwise on identical inputs.

mod activation;
mod conv;
mod merge;
mod pool;
mod upsample;

use std::str::FromStr;

use thiserror::Error;

use crate::tensor::TensorError;

pub use activation::{activate, activate_in_place, Activation};
pub use conv::{conv2d, conv2d_into, conv2d_with, conv_output_shape, ConvParams};
pub use merge::{add, add_into, concat_channels, concat_into, merged_shape};
pub use pool::{max_pool, max_pool_into, max_pool_with, pool_output_shape};
pub use upsample::{upsample_into, upsample_nearest, upsample_output_shape};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OpError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which kernel implementation an operator runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelPath {
    Reference,
    #[default]
    Optimized,
}

impl KernelPath {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelPath::Reference => "reference",
            KernelPath::Optimized => "optimized",
        }
    }
}

impl FromStr for KernelPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reference" => Ok(KernelPath::Reference),
            "optimized" => Ok(KernelPath::Optimized),
            other => Err(format!(
                "unknown kernel path `{other}` (expected reference|optimized)"
            )),
        }
    }
}
