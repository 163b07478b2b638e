//! Autograd, denoiser backbones, projection heads and the alignment objective.

pub mod alignment;
pub mod attenuation;
pub mod backbone;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod physics;
pub mod profile;
pub mod tasks;
pub mod train;

pub use alignment::{discard_heads, total_loss, AlignmentConfig, Model};
pub use backbone::{BackboneConfig, BackboneKind, TapPosition};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use physics::{Normalizer, TaskContext};

pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Params32 = ParamStore<f32>;
pub type Params64 = ParamStore<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
