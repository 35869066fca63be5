//! Calibration-free LiDAR/camera fusion by learned box matching.
//!
//! The crate simulates multi-view driving scenes ([`worldsim`]), provides a
//! small reverse-mode tensor engine ([`diffnum`]), and builds the two-level
//! matcher on top of it: a view classifier ([`viewmatch`]) routes each 3D
//! proposal to candidate cameras, a proposal matcher ([`propmatch`]) pairs
//! it with 2D proposals there, and a fusion head ([`fusionhead`]) refines
//! the detections. [`trainloop`] trains and evaluates the whole pipeline and
//! [`baseline`] is the projection-based matcher used for contrast.
//!
//! Numerics are generic over [`Scalar`]; the aliases below fix them to `f64`,
//! which is what training and evaluation use.

pub mod baseline;
pub mod diffnum;
pub mod error;
pub mod fusionhead;
pub mod model;
pub mod propmatch;
mod scalar;
pub mod trainloop;
pub mod viewmatch;
pub mod worldsim;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Real = f64;
pub type Tensor = diffnum::Tensor<Real>;
pub type Tape = diffnum::Tape<Real>;
pub type ParamStore = diffnum::ParamStore<Real>;
pub type Graph<'a> = diffnum::Graph<'a, Real>;
pub type Model = model::Model<Real>;
