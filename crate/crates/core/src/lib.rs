//! Differentiable human avatar reconstruction from monocular video.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod canonical_fields;
pub mod checkpoint;
pub mod dataset;
pub mod deformation;
pub mod diffkernel;
pub mod imageio;
pub mod language_brush;
pub mod model;
pub mod objectives;
pub mod renderer;
pub mod rig;
pub mod synth_oracle;
pub mod texture_fields;
pub mod trainer;
