//! Criss-cross attention (2D and 3D), its recurrent form, the category
//! consistent loss, slow reference oracles and an analytic cost model.
//!
//! Everything computes in `f64` unless a caller asks for `f32` through the
//! generic [`tensor::Scalar`] parameter.

pub mod attention;
pub mod cca2d;
pub mod cca3d;
pub mod cli;
pub mod cost;
pub mod error;
pub mod io;
pub mod losses;
pub mod oracles;
pub mod tensor;
pub mod toytrain;
pub mod verify;

pub use attention::{AttentionMap, CCAttentionParams, ForwardCache, LoopCache};
pub use error::{Error, Result};
pub use tensor::{ProjectionWeights, Scalar, Tensor};
