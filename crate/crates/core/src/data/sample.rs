use std::path::Path;

use crate::data::netpbm::{read_pgm, read_ppm, GrayImage, RgbImage};
use crate::error::{Error, Result};
use crate::loss::BinaryMask;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor4};

/// Input sides must be multiples of this (five 2× poolings).
pub const SIDE_DIVISOR: usize = 32;

/// One image with its ground-truth mask, both `1×C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// RGB scaled to `[0, 1]`.
    pub image: Tensor4<f32>,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(image: Tensor4<f32>, mask: BinaryMask) -> Result<Self> {
        let (i, m) = (image.shape(), mask.shape());
        if i.n != 1 || i.c != 3 || m.n != 1 || i.h != m.h || i.w != m.w {
            return Err(Error::shape(
                "sample",
                format!("image {i} and mask {m} must be 1×3×H×W and 1×1×H×W"),
            ));
        }
        Ok(Sample { image, mask })
    }

    pub fn from_images(image: &RgbImage, mask: &GrayImage) -> Result<Self> {
        Sample::new(rgb_to_tensor(image), binarize_mask(mask))
    }

    pub fn load(image: impl AsRef<Path>, mask: impl AsRef<Path>) -> Result<Self> {
        let (ip, mp) = (image.as_ref(), mask.as_ref());
        Sample::from_images(&read_ppm(ip)?, &read_pgm(mp)?).map_err(|e| match e {
            Error::Shape { detail, .. } => Error::ImageFormat(format!(
                "{} and {}: {detail}",
                ip.display(),
                mp.display()
            )),
            other => other,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }
}

/// Channel-planar `1×3×H×W` tensor with values `byte / 255`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor4<f32> {
    let (w, h) = (img.width(), img.height());
    let px = img.pixels();
    Tensor4::from_fn([1, 3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        px[rest * 3 + c] as f32 / 255.0
    })
}

/// Pixel is foreground iff its byte exceeds 127.
pub fn binarize_mask(img: &GrayImage) -> BinaryMask {
    let t = Tensor4::from_fn([1, 1, img.height(), img.width()], |i| {
        if img.pixels()[i] > 127 {
            1.0f32
        } else {
            0.0
        }
    });
    BinaryMask::new(&t).expect("thresholded values are binary")
}

/// Training and validation crop sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub train: usize,
    pub val: usize,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec { train: 64, val: 64 }
    }
}

impl CropSpec {
    pub fn validate(self) -> Result<Self> {
        check_side("train crop", self.train)?;
        check_side("validation crop", self.val)?;
        Ok(self)
    }
}

pub fn check_side(what: &str, side: usize) -> Result<()> {
    if side == 0 || !side.is_multiple_of(SIDE_DIVISOR) {
        Err(Error::Divisibility {
            what: what.to_string(),
            value: side,
            divisor: SIDE_DIVISOR,
        })
    } else {
        Ok(())
    }
}

fn crop_tensor(t: &Tensor4<f32>, top: usize, left: usize, side: usize) -> Tensor4<f32> {
    let s = t.shape();
    let mut out = Tensor4::zeros([s.n, s.c, side, side]);
    let dst = out.data_mut();
    for p in 0..s.n * s.c {
        let src = &t.data()[p * s.h * s.w..(p + 1) * s.h * s.w];
        for r in 0..side {
            let from = (top + r) * s.w + left;
            dst[(p * side + r) * side..(p * side + r + 1) * side]
                .copy_from_slice(&src[from..from + side]);
        }
    }
    out
}

fn check_crop(sample: &Sample, side: usize) -> Result<()> {
    check_side("crop side", side)?;
    if side > sample.height() || side > sample.width() {
        return Err(Error::InvalidArgument(format!(
            "crop side {side} exceeds the {}×{} sample",
            sample.height(),
            sample.width()
        )));
    }
    Ok(())
}

/// Crops image and mask at the same `(top, left)` offset.
pub fn crop_at(sample: &Sample, top: usize, left: usize, side: usize) -> Result<Sample> {
    check_crop(sample, side)?;
    if top + side > sample.height() || left + side > sample.width() {
        return Err(Error::InvalidArgument(format!(
            "crop at ({top}, {left}) with side {side} leaves the sample"
        )));
    }
    let mask = BinaryMask::new(&crop_tensor(sample.mask.tensor(), top, left, side))?;
    Sample::new(crop_tensor(&sample.image, top, left, side), mask)
}

/// Offsets drawn uniformly over every valid position, row first.
pub fn random_crop(sample: &Sample, side: usize, rng: &mut Rng) -> Result<Sample> {
    check_crop(sample, side)?;
    let top = rng.int_in(0, sample.height() - side);
    let left = rng.int_in(0, sample.width() - side);
    crop_at(sample, top, left, side)
}

pub fn center_crop(sample: &Sample, side: usize) -> Result<Sample> {
    check_crop(sample, side)?;
    crop_at(
        sample,
        (sample.height() - side) / 2,
        (sample.width() - side) / 2,
        side,
    )
}

/// Stacks equally sized samples into an `N×3×H×W` image batch and an
/// `N×1×H×W` mask batch.
pub fn stack(samples: &[Sample]) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack an empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let n = samples.len();
    let mut images = Vec::with_capacity(n * 3 * h * w);
    let mut masks = Vec::with_capacity(n * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape(
                "stack",
                format!("{}×{} sample in a {h}×{w} batch", s.height(), s.width()),
            ));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.tensor().data());
    }
    Ok((
        Tensor4::from_vec(Shape::new(n, 3, h, w), images)?,
        Tensor4::from_vec(Shape::new(n, 1, h, w), masks)?,
    ))
}
