//! Image I/O, crops, manifests and the synthetic dataset generator.

mod manifest;
mod netpbm;
mod sample;
mod synth;

pub use manifest::{load_manifest, parse_manifest, Manifest, ManifestEntry};
pub use netpbm::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm,
    GrayImage, RgbImage,
};
pub use sample::{
    binarize_mask, center_crop, check_side, crop_at, random_crop, rgb_to_tensor, stack,
    CropSpec, Sample, SIDE_DIVISOR,
};
pub use synth::{synth_generate, synth_sample, Domain, MANIFEST_NAME};
