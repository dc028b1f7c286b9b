use rand::Rng;

use super::{Float, Result, Tensor, TensorError};

/// Glorot/Xavier uniform initialisation on `±sqrt(6 / (fan_in + fan_out))`.
///
/// For kernels `[out, in, kh, kw]` both fans include the receptive field
/// `kh * kw`; for grouped convolutions `in` is already the per-group count.
pub fn xavier_uniform<T: Float, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    if shape.len() < 2 {
        return Err(TensorError::Init(format!("need at least 2 dims to derive fans, got {shape:?}")));
    }
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    if fan_in == 0 || fan_out == 0 {
        return Err(TensorError::Init(format!("zero fan for shape {shape:?}")));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}
