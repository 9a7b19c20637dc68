//! Learnable ×2 upsampling: transposed convolution with kernel 4, stride 2
//! and crop 1, so every output pixel receives exactly four kernel taps.

use super::conv::{
    add_bias, bias_grad, check_bias, col2im, gather, group_len, im2col, scatter, ConvGrads, Geom,
};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Shape, Tensor4, Trans};

pub const UP_KERNEL: usize = 4;
pub const UP_STRIDE: usize = 2;
pub const UP_CROP: usize = 1;

/// Geometry of the equivalent forward convolution that maps the upsampled
/// output back onto the input grid.
fn up_geom(op: &'static str, x: Shape, w: Shape) -> Result<Geom> {
    if w.h != UP_KERNEL || w.w != UP_KERNEL {
        return Err(Error::shape(
            op,
            format!("kernel must be {UP_KERNEL}×{UP_KERNEL}, got {w}"),
        ));
    }
    if x.c != w.n {
        return Err(Error::shape(
            op,
            format!("input has {} channels but weight {w} expects {}", x.c, w.n),
        ));
    }
    let g = Geom::new(
        w.c,
        x.h * UP_STRIDE,
        x.w * UP_STRIDE,
        UP_KERNEL,
        UP_STRIDE,
        UP_CROP,
    )?;
    debug_assert_eq!((g.oh, g.ow), (x.h, x.w));
    Ok(g)
}

/// `x: [n, in, h, w]`, `w: [in, out, 4, 4]` → `[n, out, 2h, 2w]`.
pub fn convtranspose2_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &[T],
) -> Result<Tensor4<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let g = up_geom("convtranspose2", xs, ws)?;
    check_bias("convtranspose2", b, ws.c)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut y = Tensor4::zeros([xs.n, ws.c, g.h, g.w]);
    let group = group_len(xs.n, rows * cols);
    let mut xb = vec![T::zero(); xs.c * group * cols];
    let mut col = vec![T::zero(); rows * group * cols];
    for n0 in (0..xs.n).step_by(group) {
        let count = group.min(xs.n - n0);
        let ld = count * cols;
        let xb = &mut xb[..xs.c * ld];
        gather(x, n0, count, xb);
        let col = &mut col[..rows * ld];
        gemm(Trans::Yes, Trans::No, rows, xs.c, ld, w.data(), xb, T::zero(), col);
        for i in 0..count {
            col2im(col, &g, y.sample_mut(n0 + i), ld, i * cols);
        }
    }
    for n in 0..xs.n {
        add_bias(y.sample_mut(n), b, g.h * g.w);
    }
    Ok(y)
}

pub fn convtranspose2_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    gy: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let g = up_geom("convtranspose2_backward", xs, ws)?;
    gy.expect_shape(
        "convtranspose2_backward",
        Shape::new(xs.n, ws.c, g.h, g.w),
    )?;
    let (rows, cols) = (g.col_rows(), g.col_cols());

    let group = group_len(xs.n, rows * cols);
    let mut gcol = vec![T::zero(); rows * group * cols];
    let mut xb = vec![T::zero(); xs.c * group * cols];
    let mut gxb = vec![T::zero(); xs.c * group * cols];
    let mut gx = Tensor4::zeros(xs);
    let mut gw = Tensor4::zeros(ws);
    for n0 in (0..xs.n).step_by(group) {
        let count = group.min(xs.n - n0);
        let ld = count * cols;
        let gcol = &mut gcol[..rows * ld];
        for i in 0..count {
            im2col(gy.sample(n0 + i), &g, gcol, ld, i * cols);
        }
        // The input gradient is a stride-2 convolution of the cotangent.
        let gxb = &mut gxb[..xs.c * ld];
        gemm(Trans::No, Trans::No, xs.c, rows, ld, w.data(), gcol, T::zero(), gxb);
        scatter(gxb, &mut gx, n0, count);

        let xb = &mut xb[..xs.c * ld];
        gather(x, n0, count, xb);
        let beta = if n0 == 0 { T::zero() } else { T::one() };
        gemm(Trans::No, Trans::Yes, xs.c, ld, rows, xb, gcol, beta, gw.data_mut());
    }

    Ok(ConvGrads {
        x: Some(gx),
        w: gw,
        b: bias_grad(gy),
    })
}
