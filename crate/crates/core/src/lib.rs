//! Desk-scale simulator for streaming neural radiance fields.
//!
//! Two delivery strategies are modelled end to end:
//!
//! - **parameter streaming**: the field is trained on a server from pristine
//!   captures, its MLP parameters are quantized and entropy coded, and the
//!   client renders from the decoded parameters;
//! - **pixel streaming**: the captured training images are coded with a
//!   block-transform video codec, and the client trains on the decoded frames.
//!
//! Both are scored against an uncompressed anchor with rate in bits per
//! rendered pixel and distortion as PSNR against analytic ground truth.

pub mod coder;
pub mod config;
pub mod error;
pub mod eval;
pub mod field;
pub mod image;
pub mod image_codec;
pub mod param_codec;
pub mod pipeline;
pub mod scene;
mod wire;

pub use error::{Error, Result};
pub use image::Image;
