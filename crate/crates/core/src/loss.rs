//! Segmentation loss and metrics: binary cross-entropy, the per-pixel soft
//! Jaccard score, the composite `H - ln J` objective, and discrete IoU.
//!
//! All reductions run over every pixel of the batch jointly and accumulate
//! in `f64` regardless of the tensor precision.

use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor4};

/// Probabilities are clipped to `[BCE_EPS, 1 - BCE_EPS]` inside the logs.
pub const BCE_EPS: f64 = 1e-7;
/// Lower clamp applied to the soft Jaccard score before taking its log.
pub const JACCARD_EPS: f64 = 1e-7;
/// Added to each per-pixel Jaccard denominator so `y = p = 0` gives `0/ε`.
pub const DENOM_EPS: f64 = 1e-12;
/// Default binarisation threshold for predicted probabilities.
pub const DEFAULT_THRESHOLD: f64 = 0.3;

/// A single-channel tensor whose entries are exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask(Tensor4<f32>);

impl BinaryMask {
    pub fn new<T: Scalar>(t: &Tensor4<T>) -> Result<Self> {
        if t.shape().c != 1 {
            return Err(Error::shape(
                "binary mask",
                format!("expected 1 channel, got {}", t.shape()),
            ));
        }
        if let Some(bad) = t
            .data()
            .iter()
            .find(|v| **v != T::zero() && **v != T::one())
        {
            return Err(Error::NonBinary(bad.as_f64()));
        }
        Ok(BinaryMask(t.cast()))
    }

    pub fn tensor(&self) -> &Tensor4<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor4<f32> {
        self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    pub fn foreground(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// The three loss terms for one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    /// Binary cross-entropy `H`.
    pub h: f64,
    /// Soft Jaccard score `J`.
    pub j: f64,
    /// Composite `H - ln(max(J, JACCARD_EPS))`.
    pub l: f64,
    /// Pixel count the means were taken over.
    pub n: usize,
}

fn same_shape<T: Scalar>(op: &'static str, y: &Tensor4<T>, p: &Tensor4<T>) -> Result<()> {
    if y.shape() == p.shape() {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("target {} vs prediction {}", y.shape(), p.shape()),
        ))
    }
}

fn clip_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

fn pixel_bce(y: f64, p: f64) -> f64 {
    let p = clip_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn pixel_jaccard(y: f64, p: f64) -> f64 {
    y * p / (y + p - y * p + DENOM_EPS)
}

/// Mean binary cross-entropy, natural log.
pub fn bce<T: Scalar>(y: &Tensor4<T>, p: &Tensor4<T>) -> Result<f64> {
    same_shape("bce", y, p)?;
    let total: f64 = y
        .data()
        .iter()
        .zip(p.data())
        .map(|(y, p)| pixel_bce(y.as_f64(), p.as_f64()))
        .sum();
    Ok(total / y.len() as f64)
}

/// Mean over pixels of `y·p / (y + p - y·p)`.
pub fn soft_jaccard<T: Scalar>(y: &Tensor4<T>, p: &Tensor4<T>) -> Result<f64> {
    same_shape("soft_jaccard", y, p)?;
    let total: f64 = y
        .data()
        .iter()
        .zip(p.data())
        .map(|(y, p)| pixel_jaccard(y.as_f64(), p.as_f64()))
        .sum();
    Ok(total / y.len() as f64)
}

/// `L = H - ln J` together with its gradient with respect to `p`.
///
/// The BCE term contributes no gradient where `p` is clipped, and the
/// Jaccard term none once `J` sits on its clamp.
pub fn composite_loss<T: Scalar>(y: &Tensor4<T>, p: &Tensor4<T>) -> Result<(LossValue, Tensor4<T>)> {
    same_shape("composite_loss", y, p)?;
    let n = y.len();
    let inv_n = 1.0 / n as f64;
    let h = bce(y, p)?;
    let j = soft_jaccard(y, p)?;
    let l = h - j.max(JACCARD_EPS).ln();
    let jaccard_active = j > JACCARD_EPS;

    let mut grad = Tensor4::zeros(p.shape());
    for ((g, yv), pv) in grad.data_mut().iter_mut().zip(y.data()).zip(p.data()) {
        let (yv, pv) = (yv.as_f64(), pv.as_f64());
        let mut d = 0.0;
        if (BCE_EPS..=1.0 - BCE_EPS).contains(&pv) {
            d -= inv_n * (yv / pv - (1.0 - yv) / (1.0 - pv));
        }
        if jaccard_active {
            let denom = yv + pv - yv * pv + DENOM_EPS;
            let dj = inv_n * yv * (yv + DENOM_EPS) / (denom * denom);
            d -= dj / j;
        }
        *g = T::of_f64(d);
    }
    Ok((LossValue { h, j, l, n }, grad))
}

/// Pixel becomes 1 iff `p >= t`.
pub fn threshold_mask<T: Scalar>(p: &Tensor4<T>, t: f64) -> Result<BinaryMask> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {t}"
        )));
    }
    if p.shape().c != 1 {
        return Err(Error::shape(
            "threshold_mask",
            format!("expected a 1-channel probability map, got {}", p.shape()),
        ));
    }
    Ok(BinaryMask(Tensor4::from_fn(p.shape(), |i| {
        if p.data()[i].as_f64() >= t {
            1.0
        } else {
            0.0
        }
    })))
}

/// `|A ∩ B| / |A ∪ B|` by pixel counting; two empty masks score 1.
pub fn iou_discrete(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "iou_discrete",
            format!("{} vs {}", a.shape(), b.shape()),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.0.data().iter().zip(b.0.data()) {
        let (x, y) = (x == 1.0, y == 1.0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Renders a single-image mask as 8-bit grayscale: 0 → 0, 1 → 255.
pub fn mask_to_image(m: &BinaryMask) -> Result<GrayImage> {
    let s = m.shape();
    if s.n != 1 {
        return Err(Error::shape(
            "mask_to_image",
            format!("expected a single mask, got {s}"),
        ));
    }
    let pixels = m.0.data().iter().map(|&v| if v == 1.0 { 255 } else { 0 }).collect();
    GrayImage::new(s.w, s.h, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::collections::HashSet;

    fn t(v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn bce_reference_values() {
        assert!((bce(&t(&[1.0]), &t(&[0.5])).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let expected = -(0.9f64.ln() + 0.9f64.ln()) / 2.0;
        assert!((bce(&t(&[1.0, 0.0]), &t(&[0.9, 0.1])).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.105_360_5).abs() < 1e-6);
        assert!(bce(&t(&[1.0]), &t(&[1.0])).unwrap() < 1e-6);
    }

    #[test]
    fn soft_jaccard_reference_values() {
        assert!((soft_jaccard(&t(&[1.0; 4]), &t(&[1.0; 4])).unwrap() - 1.0).abs() < 1e-9);
        assert!((soft_jaccard(&t(&[1.0, 0.0]), &t(&[0.5, 0.5])).unwrap() - 0.25).abs() < 1e-9);
        assert_eq!(soft_jaccard(&t(&[0.0; 3]), &t(&[0.0; 3])).unwrap(), 0.0);
    }

    #[test]
    fn composite_reference_values() {
        let y = t(&[1.0, 1.0, 0.0, 0.0]);
        let (v, _) = composite_loss(&y, &y).unwrap();
        assert!(v.h < 1e-6);
        assert!((v.j - 0.5).abs() < 1e-9);
        assert!((v.l - std::f64::consts::LN_2).abs() < 1e-6);

        let z = t(&[0.0; 4]);
        let (v, g) = composite_loss(&z, &z).unwrap();
        assert!((v.l - (v.h + (1.0 / JACCARD_EPS).ln())).abs() < 1e-12);
        assert!((v.l - 16.118_095_65).abs() < 1e-6);
        assert!(g.is_finite());
    }

    #[test]
    fn composite_gradient_matches_central_differences() {
        let mut rng = Rng::new(17);
        for _ in 0..20 {
            let y = Tensor4::from_fn([1, 1, 4, 4], |_| (rng.uniform() < 0.5) as u8 as f64);
            let p = Tensor4::from_fn([1, 1, 4, 4], |_| rng.uniform_in(0.05, 0.95));
            let (_, g) = composite_loss(&y, &p).unwrap();
            let step = 1e-6;
            for i in 0..p.len() {
                let mut hi = p.clone();
                hi.data_mut()[i] += step;
                let mut lo = p.clone();
                lo.data_mut()[i] -= step;
                let fd = (composite_loss(&y, &hi).unwrap().0.l - composite_loss(&y, &lo).unwrap().0.l) / (2.0 * step);
                let a = g.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
                assert!(rel < 1e-6, "pixel {i}: analytic {a} fd {fd} rel {rel}");
            }
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let y = Tensor4::from_fn([1, 1, 4, 4], |_| (rng.uniform() < 0.5) as u8 as f64);
            let p = Tensor4::from_fn([1, 1, 4, 4], |_| rng.uniform_in(0.05, 0.95));
            let (v0, g) = composite_loss(&y, &p).unwrap();
            let stepped = Tensor4::from_fn(p.shape(), |i| p.data()[i] - 1e-4 * g.data()[i]);
            let (v1, _) = composite_loss(&y, &stepped).unwrap();
            assert!(v1.l < v0.l);
        }
    }

    #[test]
    fn threshold_boundary_inclusive() {
        let m = threshold_mask(&t(&[0.29, 0.30, 0.95]), 0.3).unwrap();
        assert_eq!(m.tensor().data(), &[0.0, 1.0, 1.0]);
        let z = threshold_mask(&t(&[0.0; 5]), 0.3).unwrap();
        assert_eq!(z.foreground(), 0);
        assert!(threshold_mask(&t(&[0.5]), 0.0).is_err());
        assert!(threshold_mask(&t(&[0.5]), 1.0).is_err());
    }

    #[test]
    fn thresholding_is_idempotent() {
        let mut rng = Rng::new(8);
        let p = Tensor4::from_fn([1, 1, 8, 8], |_| rng.uniform());
        let once = threshold_mask(&p, 0.3).unwrap();
        let twice = threshold_mask(once.tensor(), 0.3).unwrap();
        assert_eq!(once, twice);
    }

    fn mask(bits: &[u8], side: usize) -> BinaryMask {
        BinaryMask::new(&Tensor4::from_vec([1, 1, side, side], bits.iter().map(|&b| b as f32).collect()).unwrap()).unwrap()
    }

    #[test]
    fn iou_reference_cases() {
        let a = mask(&[1, 1, 0, 0, 1, 1, 0, 0, 0], 3);
        assert_eq!(iou_discrete(&a, &a).unwrap(), 1.0);
        let b = mask(&[0, 0, 1, 1, 0, 0, 1, 1, 0], 3);
        assert_eq!(iou_discrete(&a, &b).unwrap(), 0.0);
        // A = {0,1,4,5}, C = {1,2,4,5}: overlap 3, union 5
        let c = mask(&[0, 1, 1, 0, 1, 1, 0, 0, 0], 3);
        assert!((iou_discrete(&a, &c).unwrap() - 0.6).abs() < 1e-15);
        // |A| = |B| = 4 with overlap 2
        let d = mask(&[1, 1, 0, 1, 1, 0, 0, 0, 0], 3);
        let f = mask(&[0, 1, 1, 0, 1, 1, 0, 0, 0], 3);
        assert!((iou_discrete(&d, &f).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let e = mask(&[0; 9], 3);
        assert_eq!(iou_discrete(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn binary_mask_rejects_other_values() {
        assert!(matches!(BinaryMask::new(&t(&[0.0, 0.5])), Err(Error::NonBinary(_))));
        assert!(BinaryMask::new(&Tensor4::<f32>::zeros([1, 2, 2, 2])).is_err());
    }

    #[test]
    fn iou_matches_set_counting() {
        let mut rng = Rng::new(99);
        for _ in 0..200 {
            let bits_a: Vec<u8> = (0..256).map(|_| (rng.uniform() < 0.3) as u8).collect();
            let bits_b: Vec<u8> = (0..256).map(|_| (rng.uniform() < 0.6) as u8).collect();
            let set_a: HashSet<usize> = (0..256).filter(|&i| bits_a[i] == 1).collect();
            let set_b: HashSet<usize> = (0..256).filter(|&i| bits_b[i] == 1).collect();
            let inter = set_a.intersection(&set_b).count();
            let union = set_a.union(&set_b).count();
            let (a, b) = (mask(&bits_a, 16), mask(&bits_b, 16));
            let iou = iou_discrete(&a, &b).unwrap();
            assert_eq!(iou, inter as f64 / union as f64);
            assert_eq!(iou, iou_discrete(&b, &a).unwrap());
        }
    }

    #[test]
    fn self_jaccard_is_foreground_fraction() {
        let mut rng = Rng::new(3);
        let y = Tensor4::from_fn([2, 1, 8, 8], |_| (rng.uniform() < 0.4) as u8 as f64);
        let fg = y.sum();
        assert!((soft_jaccard(&y, &y).unwrap() - fg / 128.0).abs() < 1e-9);
    }

    #[test]
    fn mask_rendering() {
        let ones = BinaryMask::new(&Tensor4::<f32>::full([1, 1, 2, 3], 1.0)).unwrap();
        let img = mask_to_image(&ones).unwrap();
        assert_eq!((img.width(), img.height()), (3, 2));
        assert!(img.pixels().iter().all(|&v| v == 255));
        let zeros = BinaryMask::new(&Tensor4::<f32>::zeros([1, 1, 2, 2])).unwrap();
        assert!(mask_to_image(&zeros).unwrap().pixels().iter().all(|&v| v == 0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(bce(&t(&[1.0]), &t(&[1.0, 0.0])).is_err());
        assert!(soft_jaccard(&t(&[1.0]), &t(&[1.0, 0.0])).is_err());
        assert!(composite_loss(&t(&[1.0]), &t(&[1.0, 0.0])).is_err());
    }
}
