//! Smooth rank-(N+1) projector fields that disentangle band N+1 from its
//! Weyl crossings with band N+2, their global frames on the Brillouin torus
//! and the resulting exponentially localized hopping matrices.

pub mod disentangle;
pub mod error;
pub mod frames;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod model;
pub mod wannier;

pub use error::{Error, Result};
pub use disentangle::{DisentangledField, GlueConfig};
pub use frames::FrameOptions;
pub use linalg::{CMat, CVec, C64};
pub use model::{KPoint, ModelSpec};
pub use wannier::{FrameField, HoppingTensor};
