use crate::tensor::Tensor;

use super::OpError;

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Relu6,
    LeakyRelu { slope: f32 },
}

impl Activation {
    pub fn validate(&self) -> Result<(), OpError> {
        match *self {
            Activation::LeakyRelu { slope } if !(slope > 0.0 && slope < 1.0) => Err(
                OpError::InvalidParams(format!("leaky relu slope {slope} must lie in (0, 1)")),
            ),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(&self, x: f32) -> f32 {
        match *self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Relu6 => x.clamp(0.0, 6.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
            Activation::LeakyRelu { .. } => "leaky_relu",
        }
    }
}

pub fn activate(input: &Tensor, act: Activation) -> Result<Tensor, OpError> {
    act.validate()?;
    let mut out = input.clone();
    activate_in_place(out.data_mut(), act);
    Ok(out)
}

pub fn activate_in_place(data: &mut [f32], act: Activation) {
    if act == Activation::None {
        return;
    }
    for v in data.iter_mut() {
        *v = act.apply(*v);
    }
}
