//! Query-based convolutional object detection at desk scale.
//!
//! The crate bundles a small reverse-mode tensor engine ([`autograd`]), the
//! detector itself ([`encoder`], [`decoder`], [`model`]), set-prediction
//! training ([`matching`], [`criterion`], [`train`]), synthetic data
//! ([`data`]) and COCO-style evaluation ([`eval`]).

pub mod ablate;
pub mod autograd;
pub mod boxgeom;
pub mod checkpoint;
pub mod config;
pub mod criterion;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod matching;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use autograd::{ConvGeom, Gradients, PadMode, ResizeMode, Tape, Var};
pub use error::{Error, Result};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tensor::{DType, Element, Tensor};
