//! Network description, parameters and weight files.

pub mod model;
pub mod spec;
pub mod weights;

pub use model::{Bound, DecoderOutput, Features, Network, Param, ParamKind};
pub use spec::{build_default_spec, build_spec, LayerKind, LayerSpec, NetworkSpec, Part, RfVariant};
