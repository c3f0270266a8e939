use super::{Rng, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which Xavier/Glorot distribution to draw weights from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XavierKind {
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
    #[default]
    Uniform,
    /// `N(0, 2 / (fan_in + fan_out))`.
    Normal,
}

/// Xavier initialization of a 2-D weight of shape `(fan_in, fan_out)`.
///
/// Biases are zero-initialized elsewhere; any other rank is a usage error.
pub fn xavier_init(shape: &[usize], kind: XavierKind, rng: &mut Rng) -> Result<Tensor> {
    let &[fan_in, fan_out] = shape else {
        return Err(Error::usage(format!(
            "xavier_init needs a 2-D shape, got {shape:?}"
        )));
    };
    let n = fan_in * fan_out;
    let fans = (fan_in + fan_out) as f64;
    let data = match kind {
        XavierKind::Uniform => {
            let bound = (6.0 / fans).sqrt();
            (0..n).map(|_| rng.uniform_in(-bound, bound)).collect()
        }
        XavierKind::Normal => {
            let std = (2.0 / fans).sqrt();
            (0..n).map(|_| std * rng.normal()).collect()
        }
    };
    Tensor::new(shape.to_vec(), data)
}
