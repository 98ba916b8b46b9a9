//! Luminance-conditioned image colourisation.
//!
//! A fusion generator predicts the two CIE L\*a\*b\* chroma channels from
//! the lightness channel, optionally fused with a global image embedding; a
//! vision-transformer discriminator scores (L, a, b) images as real or
//! generated. Both train from scratch on a small reverse-mode tape
//! ([`graph`]) over a fixed operation menu ([`ops`]).

pub mod colorspace;
pub mod config;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod extractor;
pub mod fid;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod ops;
pub mod params;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
