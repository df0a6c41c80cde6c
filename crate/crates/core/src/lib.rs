//! Model merging as aggregation of heterogeneously fine-tuned experts.
//!
//! The crate has four layers:
//!
//! * parameters, task vectors and merge coefficients ([`param`]),
//! * synthetic task families and a seeded mini-batch SGD trainer
//!   ([`tasks`], [`model`], [`trainer`]),
//! * merge algorithms ([`merge`]) and the closed-form excess-error bound
//!   ([`bounds`]) with constant probing ([`probe`]),
//! * empirical measurement of stability and generalization gaps
//!   ([`stability`]) and hyperparameter sweeps ([`sweep`]).

pub mod bounds;
pub mod error;
pub mod merge;
pub mod model;
pub mod param;
pub mod probe;
pub mod rng;
pub mod simplex;
pub mod stability;
pub mod stats;
pub mod sweep;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use param::{MergeCoefficients, ParamVector, TaskVector};
