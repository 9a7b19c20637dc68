//! The TernausNet segmentation network: layer graph, parameters,
//! execution and weight files.

mod arch;
mod net;
mod params;
mod weights;

pub use arch::{
    build_ternausnet, ArchError, ArchSpec, Layer, LayerKind, ParamKind, ParamSpec, SkipTag, Stage,
    ENCODER_PREFIX,
};
pub use net::{Tape, TernausNet};
pub use params::{init_params, init_params_with, InitScheme, ParamStore, ParamTensor};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, MAGIC, VERSION};
