//! Facade parsing for deformed street-view imagery.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] – a small dense tensor type with a reverse-mode tape, 2D convolution,
//!   losses, optimizers and a flat binary checkpoint format.
//! * [`transconv`] – sheared / flipped / rotated kernel bags summed into one convolution.
//! * [`geometry`] – pixel masks, convex hulls, connected components, convex rasterization
//!   and the two-rectangle quadrilateral codec.
//! * [`detect`] – anchors, proposal loss, the generalized-box head loss, decoding and NMS.
//! * [`convex`] – convex targets built from predictions and ground-truth instances.
//! * [`model`] – the trainable network, the combined loss and the training loop.
//! * [`eval`] – score-threshold fusion of detections into the semantic map, and metrics.
//! * [`data`] – the synthetic deformed-facade generator and on-disk dataset IO.
//! * [`experiment`] – ablation sweeps shared by the CLI and the acceptance suite.

pub mod config;
pub mod convex;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod model;
pub mod tensor;
pub mod transconv;

pub use error::{Error, Result};
pub use geometry::{GeneralizedBBox, Hull, PixelMask, Point, Polygon, Quad, Rect};
pub use tensor::{Tape, Tensor, Var};
