//! Declarative layer graph of the network.

use std::collections::HashMap;
use std::fmt;

use crate::ops::{fan_in, UP_KERNEL};
use crate::tensor::Shape;

/// Identifies the encoder feature map a decoder stage concatenates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SkipTag(pub u8);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3×3 same-size convolution followed by ReLU.
    Conv { in_c: usize, out_c: usize },
    /// 2×2 max pool; the pre-pool activation is kept for `skip`.
    Pool { skip: SkipTag },
    /// Stride-2 transposed convolution followed by ReLU.
    UpConv { in_c: usize, out_c: usize },
    /// Appends the channels saved under `skip` to the current activation.
    Concat {
        skip: SkipTag,
        up_c: usize,
        skip_c: usize,
    },
    /// 1×1 convolution followed by a sigmoid.
    Final { in_c: usize, out_c: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Center,
    Decoder,
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layer {
    pub kind: LayerKind,
    pub stage: Stage,
    /// Parameter prefix, e.g. `enc.conv3`; `None` for parameter-free layers.
    pub name: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Name, shape and initialisation fan-in of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Shape,
    pub fan_in: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub layers: Vec<Layer>,
}

/// Prefix shared by every encoder parameter name.
pub const ENCODER_PREFIX: &str = "enc.";

/// Output channels of the encoder convolutions, in order. A pool follows
/// the convolutions at the indices in [`POOL_AFTER`].
const ENCODER_CONVS: [usize; 7] = [64, 128, 256, 256, 512, 512, 512];
const POOL_AFTER: [usize; 5] = [0, 1, 3, 5, 6];
const CENTER_CHANNELS: usize = 512;

/// Builds the fixed U-Net graph with its VGG11-style encoder.
///
/// Encoder: conv(3→64) pool, conv(64→128) pool, conv(128→256)
/// conv(256→256) pool, conv(256→512) conv(512→512) pool, conv(512→512)
/// pool. Each pool saves its input as a skip. A 512-channel centre conv
/// runs at 1/32 resolution. Each of the five decoder stages doubles the
/// resolution with an up-convolution, concatenates the matching skip and
/// restores the encoder's channel count with a 3×3 conv. A 1×1 conv to one
/// channel and a sigmoid produce the probability map.
pub fn build_ternausnet() -> ArchSpec {
    let mut layers = Vec::new();
    let mut in_c = 3;
    let mut skips = Vec::new();
    for (i, &out_c) in ENCODER_CONVS.iter().enumerate() {
        layers.push(Layer {
            kind: LayerKind::Conv { in_c, out_c },
            stage: Stage::Encoder,
            name: Some(format!("enc.conv{}", i + 1)),
        });
        in_c = out_c;
        if POOL_AFTER.contains(&i) {
            let tag = SkipTag(skips.len() as u8 + 1);
            skips.push((tag, out_c));
            layers.push(Layer {
                kind: LayerKind::Pool { skip: tag },
                stage: Stage::Encoder,
                name: None,
            });
        }
    }
    layers.push(Layer {
        kind: LayerKind::Conv {
            in_c,
            out_c: CENTER_CHANNELS,
        },
        stage: Stage::Center,
        name: Some("center.conv".into()),
    });
    in_c = CENTER_CHANNELS;

    for (tag, skip_c) in skips.into_iter().rev() {
        let prefix = format!("dec{}", tag.0);
        let up_c = in_c / 2;
        layers.push(Layer {
            kind: LayerKind::UpConv { in_c, out_c: up_c },
            stage: Stage::Decoder,
            name: Some(format!("{prefix}.up")),
        });
        layers.push(Layer {
            kind: LayerKind::Concat {
                skip: tag,
                up_c,
                skip_c,
            },
            stage: Stage::Decoder,
            name: None,
        });
        layers.push(Layer {
            kind: LayerKind::Conv {
                in_c: up_c + skip_c,
                out_c: skip_c,
            },
            stage: Stage::Decoder,
            name: Some(format!("{prefix}.conv")),
        });
        in_c = skip_c;
    }
    layers.push(Layer {
        kind: LayerKind::Final { in_c, out_c: 1 },
        stage: Stage::Head,
        name: Some("final".into()),
    });
    ArchSpec { layers }
}

impl ArchSpec {
    /// Every parameter tensor in canonical order: per layer, weight then bias.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let Some(name) = &layer.name else { continue };
            let weight = match layer.kind {
                LayerKind::Conv { in_c, out_c } => Shape::new(out_c, in_c, 3, 3),
                LayerKind::UpConv { in_c, out_c } => Shape::new(in_c, out_c, UP_KERNEL, UP_KERNEL),
                LayerKind::Final { in_c, out_c } => Shape::new(out_c, in_c, 1, 1),
                LayerKind::Pool { .. } | LayerKind::Concat { .. } => continue,
            };
            let bias_len = match layer.kind {
                LayerKind::UpConv { out_c, .. } => out_c,
                _ => weight.n,
            };
            let fan = fan_in(weight);
            out.push(ParamSpec {
                name: format!("{name}.weight"),
                kind: ParamKind::Weight,
                shape: weight,
                fan_in: fan,
            });
            out.push(ParamSpec {
                name: format!("{name}.bias"),
                kind: ParamKind::Bias,
                shape: Shape::new(bias_len, 1, 1, 1),
                fan_in: fan,
            });
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_specs().into_iter().map(|p| p.name).collect()
    }

    pub fn encoder_conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.stage == Stage::Encoder && matches!(l.kind, LayerKind::Conv { .. }))
            .count()
    }

    pub fn pool_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Pool { .. }))
            .count()
    }

    /// `[in, out]` channel pairs of the encoder convolutions.
    pub fn encoder_channels(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .filter(|l| l.stage == Stage::Encoder)
            .filter_map(|l| match l.kind {
                LayerKind::Conv { in_c, out_c } => Some((in_c, out_c)),
                _ => None,
            })
            .collect()
    }

    /// Required divisor of the input sides: `2^pools`.
    pub fn side_divisor(&self) -> usize {
        1 << self.pool_count()
    }

    pub fn total_scalars(&self) -> usize {
        self.param_specs().iter().map(|p| p.shape.len()).sum()
    }

    /// Checks channel continuity and that each skip is produced and
    /// consumed exactly once, in stack order.
    pub fn validate(&self) -> Result<(), ArchError> {
        let mut channels = 3;
        let mut open: Vec<(SkipTag, usize)> = Vec::new();
        let mut consumed: HashMap<SkipTag, usize> = HashMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mismatch = |expected: usize| ArchError(format!(
                "layer {i} expects {expected} input channels, but {channels} arrive"
            ));
            match layer.kind {
                LayerKind::Conv { in_c, out_c }
                | LayerKind::UpConv { in_c, out_c }
                | LayerKind::Final { in_c, out_c } => {
                    if in_c != channels {
                        return Err(mismatch(in_c));
                    }
                    channels = out_c;
                }
                LayerKind::Pool { skip } => {
                    if open.iter().any(|(t, _)| *t == skip) || consumed.contains_key(&skip) {
                        return Err(ArchError(format!("skip {skip:?} produced twice")));
                    }
                    open.push((skip, channels));
                }
                LayerKind::Concat {
                    skip,
                    up_c,
                    skip_c,
                } => {
                    if up_c != channels {
                        return Err(mismatch(up_c));
                    }
                    match open.pop() {
                        Some((t, c)) if t == skip && c == skip_c => {
                            consumed.insert(skip, i);
                        }
                        other => {
                            return Err(ArchError(format!(
                                "layer {i} concatenates {skip:?} ({skip_c} ch) but the innermost open skip is {other:?}"
                            )))
                        }
                    }
                    channels = up_c + skip_c;
                }
            }
        }
        if let Some((t, _)) = open.first() {
            return Err(ArchError(format!("skip {t:?} is never consumed")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchError(pub String);

impl fmt::Display for ArchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ArchError {}
