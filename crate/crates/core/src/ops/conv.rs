//! Square-kernel convolutions lowered to gemm through im2col.
//!
//! Kernels are cross-correlations (no flip). Weights are `[out, in, k, k]`
//! so a weight tensor is already the row-major `[out, in·k·k]` gemm operand.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Shape, Tensor4, Trans};

/// Geometry of a convolution seen from its (larger) input side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv",
                format!("kernel {k} stride {stride} pad {pad} does not fit a {h}×{w} input"),
            ));
        }
        Ok(Geom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `[lo, hi)` of a kernel tap at offset `kj` whose input
    /// column lands inside `0..w` (stride 1 only).
    fn valid_span(&self, kj: usize) -> (usize, usize) {
        let off = kj as isize - self.pad as isize;
        let lo = (-off).max(0) as usize;
        let hi = ((self.w as isize - off).max(0) as usize).min(self.ow);
        (lo.min(hi), hi)
    }
}

/// Unfolds one `[c, h, w]` sample into a `[c·k·k, oh·ow]` block of `col`,
/// a row-major matrix with row stride `ld`, starting at column `off`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Geom, col: &mut [T], ld: usize, off: usize) {
    debug_assert_eq!(x.len(), g.c * g.h * g.w);
    let plane = g.col_cols();
    debug_assert!(off + plane <= ld && col.len() >= (g.col_rows() - 1) * ld + off + plane);
    for c in 0..g.c {
        let src_plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row_idx = (c * g.k + ki) * g.k + kj;
                let row = &mut col[row_idx * ld + off..row_idx * ld + off + plane];
                let (lo, hi) = g.valid_span(kj);
                for oy in 0..g.oh {
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &src_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let shift = kj as isize - g.pad as isize;
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters and accumulates the block of `col` at
/// column `off` (row stride `ld`) into `x`.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &Geom, x: &mut [T], ld: usize, off: usize) {
    debug_assert_eq!(x.len(), g.c * g.h * g.w);
    let plane = g.col_cols();
    for c in 0..g.c {
        let dst_plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row_idx = (c * g.k + ki) * g.k + kj;
                let row = &col[row_idx * ld + off..row_idx * ld + off + plane];
                let (lo, hi) = g.valid_span(kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut dst_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        if lo < hi {
                            let d0 = (lo as isize + kj as isize - g.pad as isize) as usize;
                            for (d, &s) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *d = *d + s;
                            }
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] = dst[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn check_bias<T>(op: &'static str, b: &[T], channels: usize) -> Result<()> {
    if b.len() == channels {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("bias has {} entries, expected {channels}", b.len()),
        ))
    }
}

pub(crate) fn add_bias<T: Scalar>(y: &mut [T], b: &[T], plane: usize) {
    for (chan, &bias) in y.chunks_mut(plane).zip(b) {
        chan.iter_mut().for_each(|v| *v = *v + bias);
    }
}

/// Per-channel sum of `gy` over batch and space, accumulated in f64.
pub(crate) fn bias_grad<T: Scalar>(gy: &Tensor4<T>) -> Vec<T> {
    let s = gy.shape();
    let mut acc = vec![0.0f64; s.c];
    for n in 0..s.n {
        for (a, chan) in acc.iter_mut().zip(gy.sample(n).chunks(s.plane())) {
            *a += chan.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    acc.into_iter().map(T::of_f64).collect()
}

fn kernel_geom(op: &'static str, x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Geom> {
    if w.h != w.w {
        return Err(Error::shape(op, format!("kernel must be square, got {w}")));
    }
    if x.c != w.c {
        return Err(Error::shape(
            op,
            format!("input has {} channels but weight {w} expects {}", x.c, w.c),
        ));
    }
    Geom::new(x.c, x.h, x.w, w.h, stride, pad)
}

/// Upper bound on the elements of one unfolded sample group.
const COL_BUDGET: usize = 1 << 24;

/// Samples unfolded side by side into one gemm, so deep layers with tiny
/// spatial extent still get wide matrix products.
pub(crate) fn group_len(n: usize, per_sample: usize) -> usize {
    (COL_BUDGET / per_sample.max(1)).clamp(1, n.max(1))
}

/// Copies samples `n0..n0+count` of a `[n, c, plane]` tensor into the
/// `[c, count·plane]` matrix `dst`.
pub(crate) fn gather<T: Scalar>(t: &Tensor4<T>, n0: usize, count: usize, dst: &mut [T]) {
    let (c, plane) = (t.shape().c, t.shape().plane());
    let ld = count * plane;
    for g in 0..count {
        for (ch, src) in t.sample(n0 + g).chunks(plane).enumerate() {
            dst[ch * ld + g * plane..ch * ld + (g + 1) * plane].copy_from_slice(src);
        }
    }
    debug_assert_eq!(dst.len(), c * ld);
}

/// Inverse of [`gather`].
pub(crate) fn scatter<T: Scalar>(src: &[T], t: &mut Tensor4<T>, n0: usize, count: usize) {
    let plane = t.shape().plane();
    let ld = count * plane;
    for g in 0..count {
        for (ch, dst) in t.sample_mut(n0 + g).chunks_mut(plane).enumerate() {
            dst.copy_from_slice(&src[ch * ld + g * plane..ch * ld + (g + 1) * plane]);
        }
    }
}

/// Cross-correlation with arbitrary stride and symmetric zero padding.
pub fn conv_strided_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let g = kernel_geom("conv2d", xs, ws, stride, pad)?;
    check_bias("conv2d", b, ws.n)?;
    let out = ws.n;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut y = Tensor4::zeros([xs.n, out, g.oh, g.ow]);
    let group = group_len(xs.n, rows * cols);
    let mut col = vec![T::zero(); rows * group * cols];
    let mut yb = vec![T::zero(); out * group * cols];
    for n0 in (0..xs.n).step_by(group) {
        let count = group.min(xs.n - n0);
        let ld = count * cols;
        let col = &mut col[..rows * ld];
        for i in 0..count {
            im2col(x.sample(n0 + i), &g, col, ld, i * cols);
        }
        let yb = &mut yb[..out * ld];
        gemm(Trans::No, Trans::No, out, rows, ld, w.data(), col, T::zero(), yb);
        scatter(yb, &mut y, n0, count);
    }
    for n in 0..xs.n {
        add_bias(y.sample_mut(n), b, cols);
    }
    Ok(y)
}

/// Gradients of `sum(grad_y ⊙ y)` with respect to a convolution's inputs.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    /// `None` when the caller did not ask for it.
    pub x: Option<Tensor4<T>>,
    pub w: Tensor4<T>,
    pub b: Vec<T>,
}

pub fn conv_strided_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    gy: &Tensor4<T>,
    stride: usize,
    pad: usize,
    want_x: bool,
) -> Result<ConvGrads<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    let g = kernel_geom("conv2d_backward", xs, ws, stride, pad)?;
    let expected = Shape::new(xs.n, ws.n, g.oh, g.ow);
    gy.expect_shape("conv2d_backward", expected)?;
    let out = ws.n;
    let (rows, cols) = (g.col_rows(), g.col_cols());

    let group = group_len(xs.n, rows * cols);
    let mut col = vec![T::zero(); rows * group * cols];
    let mut gyb = vec![T::zero(); out * group * cols];
    let mut gw = Tensor4::zeros(ws);
    let mut gx = want_x.then(|| Tensor4::zeros(xs));
    // Groups are visited in sample order, so the weight gradient is summed
    // in a fixed order.
    for n0 in (0..xs.n).step_by(group) {
        let count = group.min(xs.n - n0);
        let ld = count * cols;
        let gyb = &mut gyb[..out * ld];
        gather(gy, n0, count, gyb);
        let col = &mut col[..rows * ld];
        for i in 0..count {
            im2col(x.sample(n0 + i), &g, col, ld, i * cols);
        }
        let beta = if n0 == 0 { T::zero() } else { T::one() };
        gemm(Trans::No, Trans::Yes, out, ld, rows, gyb, col, beta, gw.data_mut());
        if let Some(gx) = gx.as_mut() {
            // Reuse the unfolded buffer for the input-side cotangent.
            gemm(Trans::Yes, Trans::No, rows, out, ld, w.data(), gyb, T::zero(), col);
            for i in 0..count {
                col2im(col, &g, gx.sample_mut(n0 + i), ld, i * cols);
            }
        }
    }

    Ok(ConvGrads {
        x: gx,
        w: gw,
        b: bias_grad(gy),
    })
}

/// Same-size convolution: odd square kernel, stride 1, padding `k/2`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor4<T>, w: &Tensor4<T>, b: &[T]) -> Result<Tensor4<T>> {
    let k = w.shape().h;
    if k.is_multiple_of(2) {
        return Err(Error::shape(
            "conv2d",
            format!("same-size convolution needs an odd kernel, got {}", w.shape()),
        ));
    }
    conv_strided_forward(x, w, b, 1, k / 2)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    gy: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_opt(x, w, gy, true)
}

/// Like [`conv2d_backward`], skipping the input gradient when `want_x` is
/// false (first layer of a network).
pub fn conv2d_backward_opt<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    gy: &Tensor4<T>,
    want_x: bool,
) -> Result<ConvGrads<T>> {
    let k = w.shape().h;
    if k.is_multiple_of(2) {
        return Err(Error::shape(
            "conv2d_backward",
            format!("same-size convolution needs an odd kernel, got {}", w.shape()),
        ));
    }
    conv_strided_backward(x, w, gy, 1, k / 2, want_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct six-loop cross-correlation, independent of im2col.
    fn naive_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor4<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let k = ws.h;
        let oh = (xs.h + 2 * pad - k) / stride + 1;
        let ow = (xs.w + 2 * pad - k) / stride + 1;
        let mut y = Tensor4::zeros([xs.n, ws.n, oh, ow]);
        for n in 0..xs.n {
            for o in 0..ws.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for c in 0..xs.c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                        acc += x.at(n, c, iy as usize, ix as usize) * w.at(o, c, ki, kj);
                                    }
                                }
                            }
                        }
                        y.set(n, o, oy, ox, acc);
                    }
                }
            }
        }
        y
    }

    fn random(shape: [usize; 4], rng: &mut Rng) -> Tensor4<f64> {
        Tensor4::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor4::<f64>::zeros([1, 1, 3, 3]);
        let mut rng = Rng::new(1);
        let w = random([2, 1, 3, 3], &mut rng);
        let y = conv2d_forward(&x, &w, &[0.0, 0.0]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = Rng::new(2);
        let x = random([2, 1, 5, 4], &mut rng);
        let mut w = Tensor4::zeros([1, 1, 3, 3]);
        w.set(0, 0, 1, 1, 1.0);
        let y = conv2d_forward(&x, &w, &[0.0]).unwrap();
        assert_eq!(y, x);
        let g = conv2d_backward(&x, &w, &x).unwrap();
        assert_eq!(g.x.unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_on_two_by_two() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor4::full([1, 1, 3, 3], 1.0f64);
        let y = conv2d_forward(&x, &w, &[0.0]).unwrap();
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = Rng::new(3);
        for &(stride, pad, k, h, w) in &[(1, 1, 3, 5, 6), (2, 1, 4, 6, 4), (1, 0, 1, 3, 3), (2, 1, 3, 7, 5)] {
            let x = random([2, 3, h, w], &mut rng);
            let wt = random([4, 3, k, k], &mut rng);
            let b: Vec<f64> = (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let fast = conv_strided_forward(&x, &wt, &b, stride, pad).unwrap();
            let slow = naive_conv(&x, &wt, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_grads() {
        let mut rng = Rng::new(4);
        let x = random([1, 2, 4, 4], &mut rng);
        let w = random([3, 2, 3, 3], &mut rng);
        let gy = Tensor4::zeros([1, 3, 4, 4]);
        let g = conv2d_backward(&x, &w, &gy).unwrap();
        assert_eq!(g.x.unwrap().max_abs(), 0.0);
        assert_eq!(g.w.max_abs(), 0.0);
        assert!(g.b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_grad_sums_batch_and_space() {
        let x = Tensor4::<f64>::zeros([2, 1, 2, 2]);
        let w = Tensor4::zeros([2, 1, 3, 3]);
        let gy = Tensor4::from_fn([2, 2, 2, 2], |i| i as f64);
        let g = conv2d_backward(&x, &w, &gy).unwrap();
        // channel 0: samples 0 and 1 hold 0..4 and 8..12
        assert_eq!(g.b, vec![0.0 + 1.0 + 2.0 + 3.0 + 8.0 + 9.0 + 10.0 + 11.0, 4.0 + 5.0 + 6.0 + 7.0 + 12.0 + 13.0 + 14.0 + 15.0]);
    }

    #[test]
    fn shape_errors_name_dims() {
        let x = Tensor4::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor4::<f32>::zeros([3, 5, 3, 3]);
        let err = conv2d_forward(&x, &w, &[0.0; 3]).unwrap_err().to_string();
        assert!(err.contains("2 channels") && err.contains('5'), "{err}");
        let w = Tensor4::<f32>::zeros([3, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, &[0.0; 2]).is_err());
        let gy = Tensor4::<f32>::zeros([1, 3, 2, 2]);
        assert!(conv2d_backward(&x, &w, &gy).is_err());
    }

    #[test]
    fn batched_gemm_matches_one_sample_at_a_time() {
        let mut rng = Rng::new(11);
        let x = random([3, 4, 5, 5], &mut rng);
        let w = random([6, 4, 3, 3], &mut rng);
        let b = [0.1, -0.2, 0.3, 0.0, 0.5, -0.5];
        let gy = random([3, 6, 5, 5], &mut rng);
        let y = conv_strided_forward(&x, &w, &b, 1, 1).unwrap();
        let g = conv_strided_backward(&x, &w, &gy, 1, 1, true).unwrap();
        let gx = g.x.unwrap();
        for n in 0..3 {
            let xn = Tensor4::from_vec([1, 4, 5, 5], x.sample(n).to_vec()).unwrap();
            let gyn = Tensor4::from_vec([1, 6, 5, 5], gy.sample(n).to_vec()).unwrap();
            assert_eq!(conv_strided_forward(&xn, &w, &b, 1, 1).unwrap().data(), y.sample(n));
            let gn = conv_strided_backward(&xn, &w, &gyn, 1, 1, true).unwrap();
            assert_eq!(gn.x.unwrap().data(), gx.sample(n));
        }
    }
}
