//! Deep structural causal model for images whose parents include areas of
//! anatomical structures, with counterfactual fine-tuning.

pub mod auxiliary;
pub mod cft;
pub mod checkpoint;
pub mod config;
pub mod dscm;
pub mod error;
pub mod eval;
pub mod flow;
pub mod graph;
pub mod hvae;
pub mod report;
pub mod image;
pub mod pipeline;
pub mod scm;
pub mod synth;

pub use error::{Error, Result};
pub use graph::{AttributeKind, AttributeSpec, AttributeVector, CausalGraph, Intervention, Observation};
pub use image::{Image, SoftMask};

pub type Dscm32 = dscm::Dscm<f32>;
pub type Dscm64 = dscm::Dscm<f64>;
pub type Hvae32 = hvae::Hvae<f32>;
pub type Hvae64 = hvae::Hvae<f64>;
pub type Segmentor32 = auxiliary::Segmentor<f32>;
pub type Regressor32 = auxiliary::Regressor<f32>;
