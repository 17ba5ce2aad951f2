//! Masked language inference for a small probabilistic-programming language.
//!
//! Programs are parsed and executed by [`ast`], [`text`] and [`exec`];
//! [`augment`] rewrites them; [`dataset`] turns executions into masked
//! training instances; [`nn`] holds the transformer; [`train`], [`infer`] and
//! [`eval`] cover optimization, posterior queries and diagnostics.

pub mod ast;
pub mod dataset;
pub mod eval;
pub mod augment;
pub mod exec;
pub mod infer;
pub mod nn;
pub mod programs;
pub mod rng;
pub mod scalar;
pub mod text;
pub mod train;

pub use ast::{Program, Slot, VarName};
pub use exec::Trace;
pub use scalar::Scalar;

pub type Model = nn::ModelParams<f32>;
pub type Model64 = nn::ModelParams<f64>;
