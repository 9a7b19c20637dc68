use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor4};

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shape(
            "concat_channels",
            format!("batch and spatial dims must agree, got {sa} and {sb}"),
        ));
    }
    let mut y = Tensor4::zeros([sa.n, sa.c + sb.c, sa.h, sa.w]);
    let (la, lb) = (sa.sample_len(), sb.sample_len());
    for n in 0..sa.n {
        let dst = y.sample_mut(n);
        dst[..la].copy_from_slice(a.sample(n));
        dst[la..la + lb].copy_from_slice(b.sample(n));
    }
    Ok(y)
}

/// Splits a concatenated gradient back into `(grad_a, grad_b)`.
pub fn split_channels_backward<T: Scalar>(
    gy: &Tensor4<T>,
    a_channels: usize,
    b_channels: usize,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let s = gy.shape();
    if s.c != a_channels + b_channels || a_channels == 0 || b_channels == 0 {
        return Err(Error::shape(
            "split_channels_backward",
            format!("cannot split {} channels into {a_channels} + {b_channels}", s.c),
        ));
    }
    let mut ga = Tensor4::zeros(Shape::new(s.n, a_channels, s.h, s.w));
    let mut gb = Tensor4::zeros(Shape::new(s.n, b_channels, s.h, s.w));
    let la = a_channels * s.plane();
    for n in 0..s.n {
        let src = gy.sample(n);
        ga.sample_mut(n).copy_from_slice(&src[..la]);
        gb.sample_mut(n).copy_from_slice(&src[la..]);
    }
    Ok((ga, gb))
}
