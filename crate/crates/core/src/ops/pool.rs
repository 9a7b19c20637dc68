use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor4};

/// Winning input positions of a 2×2 max pool, as linear indices into the
/// pooled input tensor. One entry per output element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Argmax {
    pub input_shape: Shape,
    pub indices: Vec<usize>,
}

/// 2×2 max pool with stride 2. Ties go to the lowest linear index.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Argmax)> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::shape(
            "maxpool2",
            format!("height and width must be even, got {}×{}", s.h, s.w),
        ));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut y = Tensor4::zeros([s.n, s.c, oh, ow]);
    let mut indices = Vec::with_capacity(y.len());
    let src = x.data();
    for (plane_idx, out_plane) in y.data_mut().chunks_mut(oh * ow).enumerate() {
        let base = plane_idx * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * s.w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + s.w, top + s.w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out_plane[oy * ow + ox] = src[best];
                indices.push(best);
            }
        }
    }
    Ok((
        y,
        Argmax {
            input_shape: s,
            indices,
        },
    ))
}

pub fn maxpool2_backward<T: Scalar>(
    gy: &Tensor4<T>,
    argmax: &Argmax,
    x_shape: Shape,
) -> Result<Tensor4<T>> {
    if argmax.input_shape != x_shape {
        return Err(Error::shape(
            "maxpool2_backward",
            format!(
                "argmax was recorded for {} but input shape is {x_shape}",
                argmax.input_shape
            ),
        ));
    }
    gy.expect_shape(
        "maxpool2_backward",
        Shape::new(x_shape.n, x_shape.c, x_shape.h / 2, x_shape.w / 2),
    )?;
    let mut gx = Tensor4::zeros(x_shape);
    let dst = gx.data_mut();
    for (&idx, &g) in argmax.indices.iter().zip(gy.data()) {
        dst[idx] = dst[idx] + g;
    }
    Ok(gx)
}

/// Smallest gap between a window's maximum and its runner-up; a finite
/// difference step larger than half of this may flip the winner.
pub fn min_window_gap<T: Scalar>(x: &Tensor4<T>) -> f64 {
    let s = x.shape();
    let mut gap = f64::INFINITY;
    let src = x.data();
    for p in 0..s.n * s.c {
        let base = p * s.h * s.w;
        for oy in 0..s.h / 2 {
            for ox in 0..s.w / 2 {
                let top = base + 2 * oy * s.w + 2 * ox;
                let mut v = [top, top + 1, top + s.w, top + s.w + 1].map(|i| src[i].as_f64());
                v.sort_by(|a, b| b.total_cmp(a));
                gap = gap.min(v[0] - v[1]);
            }
        }
    }
    gap
}
