//! Numerical core: fields, residual operators, data generators, diffusion
//! schedules and metrics.

pub mod datagen;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod fem;
pub mod field;
pub mod linalg;
pub mod metrics;
pub mod residual;
pub mod scalar;
pub mod task;

pub use diffusion::{make_cosine_schedule, EmaState, NoiseSchedule};
pub use error::{Error, Result};
pub use field::{make_observation_mask, BinaryMask, Field, Grid2D};
pub use residual::ResidualBundle;
pub use scalar::Scalar;
pub use task::Task;

pub type Field32 = Field<f32>;
pub type Field64 = Field<f64>;
pub type Bundle32 = ResidualBundle<f32>;
pub type Bundle64 = ResidualBundle<f64>;
