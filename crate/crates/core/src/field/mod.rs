//! The learned radiance field: encoding, MLPs, ray sampling, compositing,
//! training and view synthesis.

pub mod checkpoint;
pub mod encoding;
pub mod mlp;
pub mod model;
pub mod render;
pub mod train;

pub use encoding::{positional_encode, EncodingConfig};
pub use mlp::{Layer, MlpParams};
pub use model::{query_field, render_rays, synthesize_view, Architecture, RadianceFieldModel};
pub use render::{
    sample_coarse, sample_fine, trace_ray, volume_render, RadianceSample, Ray, RenderConfig,
};
pub use train::{
    loss_and_grad, loss_and_grad_at, train, train_with_log, Gradient, LossReport, RaySamples,
    RayTable, TrainConfig, TrainLog,
};
