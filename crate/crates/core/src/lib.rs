//! Optoelectronic time-to-first-spike toolkit.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::large_enum_variant)]

pub mod attention;
pub mod converter;
pub mod data;
pub mod decay;
pub mod energy;
pub mod engine;
pub mod error;
pub mod io;
pub mod manifest;
pub mod matrix;
pub mod qnn;
pub mod rng;
pub mod robustness;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;

pub use converter::{ConversionConfig, OttersModel};
pub use decay::{DecayModel, SpikeTimeTable};
pub use energy::{EnergyCostTable, EnergyReport, ModelKind, Workload};
pub use engine::{EngineMode, SamplingMode};
pub use manifest::RunManifest;
pub use qnn::{ActQuantizer, NoiseSpec, NoiseTarget, QnnModel};
pub use robustness::{SweepConfig, SweepResult};
