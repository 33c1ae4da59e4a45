//! Multi-agent diffusion policy (MADP) for decentralized coverage control.
//!
//! The crate contains the whole pipeline: a coverage-control simulator
//! ([`world`], [`coverage`]), Voronoi experts ([`experts`]), the policy
//! network ([`perception`], [`stformer`]), the diffusion machinery
//! ([`diffusion`]), imitation learning ([`train`]) and the experiment
//! harness ([`evalharness`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases at
//! the crate root fix the scalar to `f64`, which is what the training and
//! evaluation layers use.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coverage;
pub mod diffusion;
mod error;
pub mod evalharness;
pub mod experts;
pub mod ndtensor;
pub mod perception;
pub mod rng;
mod scalar;
pub mod stformer;
pub mod train;
pub mod world;

pub use error::{Error, Result};
pub use scalar::{clamp_norm, Point, Scalar};

pub type Tensor = ndtensor::Tensor<f64>;
pub type Tape = ndtensor::Tape<f64>;
pub type ParamStore = ndtensor::ParamStore<f64>;
pub type ImportanceField = world::ImportanceField<f64>;
pub type SwarmState = world::SwarmState<f64>;
pub type Tessellation = coverage::Tessellation<f64>;
pub type LocalObservation = perception::LocalObservation<f64>;
pub type NoiseSchedule = diffusion::NoiseSchedule<f64>;
pub type MadpModel = diffusion::MadpModel<f64>;
