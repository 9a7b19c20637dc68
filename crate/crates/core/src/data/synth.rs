//! Procedural two-domain segmentation datasets.
//!
//! Both domains share one visual vocabulary: a smooth, noisy background, a
//! few unlabeled "clutter" blobs, and labeled objects carrying a striped
//! surface texture. They differ in the geometry of the labeled objects:
//! domain A draws rotated ellipses, domain B axis-aligned rectangles.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::manifest::Manifest;
use crate::data::netpbm::{write_pgm, write_ppm, GrayImage, RgbImage};
use crate::data::sample::check_side;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MANIFEST_NAME: &str = "manifest.txt";

const MAX_SHAPES: usize = 5;
const MAX_CLUTTER: usize = 5;
const PIXEL_NOISE: f64 = 24.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    /// Rotated filled ellipses ("vehicle-like").
    A,
    /// Axis-aligned filled rectangles ("building-like").
    B,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            other => Err(Error::InvalidArgument(format!(
                "unknown domain `{other}`, expected A or B"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        cos: f64,
        sin: f64,
    },
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse {
                cx,
                cy,
                a,
                b,
                cos,
                sin,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

/// Pixel-centred shape whose centre always falls on an image pixel, so the
/// shape covers at least that pixel.
fn random_shape(domain: Domain, side: f64, rng: &mut Rng) -> Shape {
    let cx = rng.int_in(0, side as usize - 1) as f64 + 0.5;
    let cy = rng.int_in(0, side as usize - 1) as f64 + 0.5;
    match domain {
        Domain::A => {
            let theta = rng.uniform_in(0.0, PI);
            Shape::Ellipse {
                cx,
                cy,
                a: rng.uniform_in(side / 10.0, side / 5.0),
                b: rng.uniform_in(side / 16.0, side / 8.0),
                cos: theta.cos(),
                sin: theta.sin(),
            }
        }
        Domain::B => {
            let hw = rng.uniform_in(side / 14.0, side / 6.0);
            let hh = rng.uniform_in(side / 14.0, side / 6.0);
            Shape::Rect {
                x0: cx - hw,
                y0: cy - hh,
                x1: cx + hw,
                y1: cy + hh,
            }
        }
    }
}

struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

impl Grating {
    fn random(rng: &mut Rng, min_period: f64, max_period: f64, amp: f64) -> Self {
        let angle = rng.uniform_in(0.0, PI);
        let period = rng.uniform_in(min_period, max_period);
        Grating {
            fx: angle.cos() * 2.0 * PI / period,
            fy: angle.sin() * 2.0 * PI / period,
            phase: rng.uniform_in(0.0, 2.0 * PI),
            amp,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.amp * (self.fx * x + self.fy * y + self.phase).sin()
    }
}

fn random_color(rng: &mut Rng, lo: f64, hi: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.uniform_in(lo, hi))
}

/// Draws one image and its mask.
pub fn synth_sample(domain: Domain, side: usize, rng: &mut Rng) -> (RgbImage, GrayImage) {
    let s = side as f64;
    let background = random_color(rng, 70.0, 180.0);
    let waves: Vec<Grating> = (0..3)
        .map(|_| Grating::random(rng, s / 4.0, s, 18.0))
        .collect();

    let clutter_count = rng.int_in(0, MAX_CLUTTER);
    let clutter: Vec<(Shape, [f64; 3])> = (0..clutter_count)
        .map(|_| {
            let d = if rng.uniform() < 0.5 { Domain::A } else { Domain::B };
            let shape = random_shape(d, s, rng);
            let shift = rng.uniform_in(-40.0, 40.0);
            (shape, background.map(|c| c + shift))
        })
        .collect();

    let count = rng.int_in(1, MAX_SHAPES);
    let objects: Vec<Shape> = (0..count).map(|_| random_shape(domain, s, rng)).collect();
    let object_color = random_color(rng, 60.0, 200.0);
    let stripes = Grating::random(rng, 3.0, 5.0, 22.0);

    let mut rgb = vec![0u8; side * side * 3];
    let mut mask = vec![0u8; side * side];
    for row in 0..side {
        for col in 0..side {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let shade: f64 = waves.iter().map(|g| g.at(x, y)).sum();
            let mut color = background.map(|c| c + shade);
            for (shape, c) in &clutter {
                if shape.contains(x, y) {
                    color = c.map(|v| v + shade);
                }
            }
            if objects.iter().any(|o| o.contains(x, y)) {
                let t = stripes.at(x, y);
                color = object_color.map(|c| c + t + 0.5 * shade);
                mask[row * side + col] = 255;
            }
            let px = &mut rgb[(row * side + col) * 3..(row * side + col) * 3 + 3];
            for (p, c) in px.iter_mut().zip(color) {
                let noisy = c + rng.uniform_in(-PIXEL_NOISE, PIXEL_NOISE);
                *p = noisy.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (
        RgbImage::new(side, side, rgb).expect("buffer sized for the image"),
        GrayImage::new(side, side, mask).expect("buffer sized for the mask"),
    )
}

/// Writes `count` samples as `img_NNNN.ppm` / `mask_NNNN.pgm` plus
/// `manifest.txt` into `out_dir`.
///
/// Sample `i` draws from its own stream forked off `rng`, so a dataset is a
/// pure function of `(domain, count, side, seed)`.
pub fn synth_generate(
    domain: Domain,
    count: usize,
    side: usize,
    rng: &mut Rng,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    check_side("synthetic image side", side)?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest::new(out_dir);
    for i in 0..count {
        let mut sample_rng = rng.fork(i as u64);
        let (img, mask) = synth_sample(domain, side, &mut sample_rng);
        let (img_name, mask_name) = (format!("img_{i:04}.ppm"), format!("mask_{i:04}.pgm"));
        write_ppm(&img, out_dir.join(&img_name))?;
        write_pgm(&mask, out_dir.join(&mask_name))?;
        manifest.push(img_name, mask_name);
    }
    manifest.save(out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::load_manifest;

    #[test]
    fn every_mask_has_foreground() {
        let mut rng = Rng::new(4);
        for domain in [Domain::A, Domain::B] {
            for _ in 0..200 {
                let (_, m) = synth_sample(domain, 32, &mut rng);
                assert!(m.pixels().contains(&255));
                assert!(m.pixels().iter().all(|&v| v == 0 || v == 255));
            }
        }
    }

    #[test]
    fn writes_manifest_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(Domain::B, 10, 32, &mut Rng::new(7), dir.path()).unwrap();
        assert_eq!(m.len(), 10);
        let files = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(files, 21);
        let text = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert_eq!(load_manifest(dir.path().join(MANIFEST_NAME)).unwrap().len(), 10);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_generate(Domain::A, 3, 32, &mut Rng::new(1), a.path()).unwrap();
        synth_generate(Domain::A, 3, 32, &mut Rng::new(1), b.path()).unwrap();
        for name in ["img_0002.ppm", "mask_0001.pgm", MANIFEST_NAME] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn rejects_bad_side() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synth_generate(Domain::A, 1, 40, &mut Rng::new(1), dir.path()).is_err());
    }

    #[test]
    fn domain_parsing() {
        assert_eq!("a".parse::<Domain>().unwrap(), Domain::A);
        assert_eq!("B".parse::<Domain>().unwrap(), Domain::B);
        assert!("C".parse::<Domain>().is_err());
    }
}
