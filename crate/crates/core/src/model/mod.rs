//! Transformer encoder classifier: configuration, parameters, forward pass,
//! activation tracing and checkpoint container.

mod batch;
mod checkpoint;
mod config;
mod params;
mod trace;
mod transformer;

pub use batch::Batch;
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{Activation, MlpKind, ModelConfig, NormPlacement};
pub(crate) use params::normal_tensor;
pub use params::{Bindings, Param, ParamStore};
pub use trace::{feature_map, ActivationTrace, LayerTrace};
pub(crate) use trace::mask_3d;
pub use transformer::{
    first_projection_name, mlp_forward, model_forward, ForwardContext, ForwardOptions, ForwardOutput,
    TransformerModel, ADAPTIVE_PARAM,
};
