use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor4};

/// Input units feeding one output of a weight tensor: `dim1 · kh · kw`.
///
/// This is `in_channels·k²` for a convolution `[out, in, k, k]` and
/// `out_channels·k²` for a transposed convolution `[in, out, k, k]`.
pub fn fan_in(weight: Shape) -> usize {
    weight.c * weight.h * weight.w
}

/// LeCun uniform bound `sqrt(1 / fan_in)`.
pub fn lecun_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

/// Fills a tensor of `shape` with draws from `U[-L, L]`, `L = sqrt(1/fan_in)`.
///
/// Biases pass their weight's `fan_in`.
pub fn lecun_uniform_fill<T: Scalar>(rng: &mut Rng, shape: Shape, fan_in: usize) -> Tensor4<T> {
    let bound = lecun_bound(fan_in);
    Tensor4::from_fn(shape, |_| T::of_f64(rng.uniform_in(-bound, bound)))
}
