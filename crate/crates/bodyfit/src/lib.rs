//! Estimation of a single body shape and per-frame posture from a sequence
//! of noisy, incomplete 3D scans of a dressed subject.
//!
//! The pipeline runs in four stages:
//!
//! 1. anatomical landmarks are tracked through the sequence with exact
//!    max-product inference on a tree-structured probabilistic model
//!    ([`landmark`]),
//! 2. a rigged template is posed per frame by fitting first the landmarks and
//!    then the scan surface ([`skeleton`]),
//! 3. the posed template is deformed non-rigidly towards the scan while being
//!    kept inside clothing ([`nonrigid`]),
//! 4. all per-frame deformed templates are restricted to a learned
//!    posture-invariant shape space and a single body shape is extracted
//!    ([`shape`]).
//!
//! Supporting modules provide mesh processing and geodesics ([`mesh`]),
//! metric-preserving canonical forms ([`canonical`]), a quasi-Newton
//! minimizer ([`optimize`]), synthetic test data ([`synth`]), file formats
//! ([`io`]), body measurements ([`measure`]), evaluation metrics ([`eval`])
//! and end-to-end orchestration ([`pipeline`]).

pub mod canonical;
pub mod error;
pub mod eval;
pub mod geom;
pub mod io;
pub mod landmark;
pub mod measure;
pub mod mesh;
pub mod nonrigid;
pub mod optimize;
pub mod pipeline;
pub mod shape;
pub mod skeleton;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
