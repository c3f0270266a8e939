//! Deterministic numeric substrate: tensors, RNG streams, initialization,
//! Adam, stable log-domain arithmetic and a central-difference gradient oracle.

mod adam;
pub mod graph;
mod init;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use init::{xavier_init, XavierKind};
pub use rng::Rng;
pub use tensor::Tensor;
pub(crate) use tensor::{gemm, gemm_strided};

use crate::error::{Error, Result};

/// `log(exp(a) + exp(b))` without overflow; `-inf` is the additive identity.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Stable log of the sum of exponentials.
///
/// Returns `-inf` exactly when every entry is `-inf`.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::usage("logsumexp of an empty list"));
    }
    Ok(logsumexp_unchecked(values))
}

pub(crate) fn logsumexp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::usage(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!(
                "function is not finite near coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest elementwise relative error between two gradients.
///
/// Entries where both magnitudes fall below `floor` are compared against `floor`
/// instead, so round-off on near-zero components does not dominate.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
