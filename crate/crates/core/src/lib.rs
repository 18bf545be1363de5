// NaN-rejecting checks read `!(x > 0)` on purpose, and index loops mirror the maths.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod datagen;
pub mod em;
pub mod error;
pub mod inducing;
pub mod linalg;
pub mod model;
pub mod obs;
pub mod oracle;
pub mod real;
pub mod sde;
pub mod smc;
pub mod stats;

pub use error::{Error, Result, Warning};
pub use real::Real;

pub use datagen::{ChirpSpec, LorenzSpec, SpikeSpec, Truth};
pub use em::{EmConfig, EmTrace, UpdateFlags};
pub use inducing::{InducingPoint, InducingSequence, MarkModel, PriorHyperparams, WaitingTimeModel};
pub use model::{InitialState, ModelParams};
pub use obs::{GaussianObsModel, ObsModel, ObservationSeries, PointProcessObsModel};
pub use sde::{LatentPath, NoiseParams, TimeGrid};
pub use smc::{SmcConfig, SmcResult};

pub type InducingSequence64 = InducingSequence<f64>;
pub type InducingSequence32 = InducingSequence<f32>;
pub type ModelParams64 = ModelParams<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type ObservationSeries64 = ObservationSeries<f64>;
pub type ObservationSeries32 = ObservationSeries<f32>;
pub type LatentPath64 = LatentPath<f64>;
pub type LatentPath32 = LatentPath<f32>;
pub type TimeGrid64 = TimeGrid<f64>;
pub type TimeGrid32 = TimeGrid<f32>;
pub type SmcResult64 = SmcResult<f64>;
pub type SmcResult32 = SmcResult<f32>;
pub type EmFit64 = em::EmFit<f64>;
pub type EmFit32 = em::EmFit<f32>;
