//! Speech-based condition detection with adversarial speaker unlearning.
//!
//! The numeric core is generic over [`scalar::Real`] (`f32` or `f64`);
//! the aliases below fix it to `f64`, which training and the model file
//! format use throughout.

pub mod adversarial;
pub mod audio;
pub mod corpus;
pub mod dataset;
pub mod dsp;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod scalar;

pub use scalar::Real;

pub type Dataset = dataset::Dataset<f64>;
pub type Mlp = nn::Mlp<f64>;
pub type Network = nn::NetworkParams<f64>;
pub type Optimizer = nn::MomentumSgd<f64>;
pub type Analyzer = dsp::Analyzer<f64>;
pub type IcmModel = adversarial::IcmModel<f64>;
pub type DamModel = adversarial::DamModel<f64>;
pub type ProbeResult = adversarial::ProbeResult<f64>;
